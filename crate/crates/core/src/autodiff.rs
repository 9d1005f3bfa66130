//! Scalar abstraction plus a fixed-width forward-mode dual number.
//!
//! Numerical kernels that need exact Jacobians (spline flows, the style
//! decoder) are written once against [`Real`] and evaluated either on plain
//! `f64` or on [`Dual<N>`] to obtain derivatives with respect to `N` seeds.

use std::ops::{Add, Div, Mul, Neg, Sub};

pub trait Real:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn cst(x: f64) -> Self;
    fn value(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;

    fn square(self) -> Self {
        self * self
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    fn softplus(self) -> Self {
        if self.value() > 30.0 {
            self
        } else if self.value() < -30.0 {
            self.exp()
        } else {
            (self.exp() + 1.0).ln()
        }
    }

    fn sigmoid(self) -> Self {
        Self::cst(1.0) / ((-self).exp() + 1.0)
    }
}

impl Real for f64 {
    fn cst(x: f64) -> Self {
        x
    }
    fn value(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn softplus(self) -> Self {
        if self > 30.0 {
            self
        } else {
            self.exp().ln_1p()
        }
    }
}

/// Value together with its gradient against `N` seed directions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual<const N: usize> {
    pub v: f64,
    pub d: [f64; N],
}

impl<const N: usize> Dual<N> {
    pub fn constant(v: f64) -> Self {
        Dual { v, d: [0.0; N] }
    }

    /// The `i`-th independent variable.
    pub fn seed(v: f64, i: usize) -> Self {
        let mut d = [0.0; N];
        d[i] = 1.0;
        Dual { v, d }
    }

    #[inline]
    fn chain(self, v: f64, dv: f64) -> Self {
        let mut d = self.d;
        for x in &mut d {
            *x *= dv;
        }
        Dual { v, d }
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a += b;
        }
        Dual { v: self.v + o.v, d }
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a -= b;
        }
        Dual { v: self.v - o.v, d }
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = self.d[i] * o.v + o.d[i] * self.v;
        }
        Dual { v: self.v * o.v, d }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        let v = self.v * inv;
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = (self.d[i] - v * o.d[i]) * inv;
        }
        Dual { v, d }
    }
}

impl<const N: usize> Neg for Dual<N> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        self.chain(-self.v, -1.0)
    }
}

impl<const N: usize> Add<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn add(self, o: f64) -> Self {
        Dual {
            v: self.v + o,
            d: self.d,
        }
    }
}

impl<const N: usize> Sub<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn sub(self, o: f64) -> Self {
        Dual {
            v: self.v - o,
            d: self.d,
        }
    }
}

impl<const N: usize> Mul<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn mul(self, o: f64) -> Self {
        self.chain(self.v * o, o)
    }
}

impl<const N: usize> Div<f64> for Dual<N> {
    type Output = Self;
    #[inline]
    fn div(self, o: f64) -> Self {
        self.chain(self.v / o, 1.0 / o)
    }
}

impl<const N: usize> Real for Dual<N> {
    fn cst(x: f64) -> Self {
        Dual::constant(x)
    }
    fn value(self) -> f64 {
        self.v
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e)
    }
    fn ln(self) -> Self {
        self.chain(self.v.ln(), 1.0 / self.v)
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, 0.5 / s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dual_matches_hand_derivative() {
        // f(x, y) = exp(x) * y / sqrt(x + y)
        let (x0, y0) = (0.3, 1.7);
        let x = Dual::<2>::seed(x0, 0);
        let y = Dual::<2>::seed(y0, 1);
        let f = x.exp() * y / (x + y).sqrt();
        let s = (x0 + y0).sqrt();
        let fx = x0.exp() * y0 / s - 0.5 * x0.exp() * y0 / (s * s * s);
        let fy = x0.exp() / s - 0.5 * x0.exp() * y0 / (s * s * s);
        assert!((f.d[0] - fx).abs() < 1e-14);
        assert!((f.d[1] - fy).abs() < 1e-14);
    }

    #[test]
    fn softplus_is_stable_and_consistent() {
        for x in [-50.0, -3.0, 0.0, 2.5, 40.0] {
            let a = <f64 as Real>::softplus(x);
            let b = Dual::<1>::seed(x, 0).softplus();
            assert!((a - b.v).abs() < 1e-12 * (1.0 + a.abs()));
            let sig = 1.0 / (1.0 + (-x).exp());
            assert!((b.d[0] - sig).abs() < 1e-12);
        }
    }
}
