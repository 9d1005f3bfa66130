//! Monotone rational-quadratic spline on `[-B, B]` with identity tails.

use crate::autodiff::{Dual, Real};
use crate::error::{Error, Result};

pub(crate) const MIN_BIN: f64 = 1e-3;
pub(crate) const MIN_DERIVATIVE: f64 = 1e-3;

/// Offset making `MIN_DERIVATIVE + softplus(0 + offset) == 1`.
fn derivative_offset() -> f64 {
    ((1.0 - MIN_DERIVATIVE).exp() - 1.0).ln()
}

/// Knots of one spline. `x[0] = y[0] = -B`, `x[K] = y[K] = B`, and the
/// boundary derivatives are 1 so the linear tails join smoothly.
#[derive(Debug, Clone, PartialEq)]
pub struct Knots {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub d: Vec<f64>,
}

/// Number of unconstrained parameters for `bins` bins.
pub fn raw_len(bins: usize) -> usize {
    3 * bins - 1
}

fn softmax(raw: &[f64]) -> Vec<f64> {
    let m = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = raw.iter().map(|r| (r - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn cumulative(raw: &[f64], bound: f64) -> (Vec<f64>, Vec<f64>) {
    let k = raw.len();
    let s = softmax(raw);
    let mut knots = Vec::with_capacity(k + 1);
    knots.push(-bound);
    let mut acc = -bound;
    for si in &s[..k - 1] {
        acc += 2.0 * bound * (MIN_BIN + (1.0 - k as f64 * MIN_BIN) * si);
        knots.push(acc);
    }
    knots.push(bound);
    (knots, s)
}

impl Knots {
    pub fn from_raw(raw: &[f64], bins: usize, bound: f64) -> Result<Self> {
        if bins < 2 || raw.len() != raw_len(bins) || !(bound > 0.0) {
            return Err(Error::InvalidSpline(format!(
                "{} raw parameters for {bins} bins on [-{bound}, {bound}]",
                raw.len()
            )));
        }
        if raw.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidSpline("non-finite parameter".into()));
        }
        let (x, _) = cumulative(&raw[..bins], bound);
        let (y, _) = cumulative(&raw[bins..2 * bins], bound);
        let off = derivative_offset();
        let mut d = Vec::with_capacity(bins + 1);
        d.push(1.0);
        d.extend(raw[2 * bins..].iter().map(|r| MIN_DERIVATIVE + (r + off).softplus()));
        d.push(1.0);
        Knots::new(x, y, d)
    }

    pub fn new(x: Vec<f64>, y: Vec<f64>, d: Vec<f64>) -> Result<Self> {
        let ok = x.len() >= 3
            && y.len() == x.len()
            && d.len() == x.len()
            && x.windows(2).all(|w| w[1] > w[0])
            && y.windows(2).all(|w| w[1] > w[0])
            && d.iter().all(|&v| v > 0.0 && v.is_finite());
        if ok {
            Ok(Knots { x, y, d })
        } else {
            Err(Error::InvalidSpline(
                "bin widths, heights and derivatives must be positive".into(),
            ))
        }
    }

    pub fn bound(&self) -> f64 {
        *self.x.last().unwrap()
    }

    fn bin(knots: &[f64], t: f64) -> usize {
        let k = knots.len() - 1;
        knots[1..k].partition_point(|&x| x <= t).min(k - 1)
    }

    /// `(y, ln dy/dx)`.
    pub fn forward(&self, x: f64) -> (f64, f64) {
        let b = self.bound();
        if x <= -b || x >= b {
            return (x, 0.0);
        }
        let k = Self::bin(&self.x, x);
        let (y, ld) = rq_forward(
            x,
            self.x[k],
            self.x[k + 1],
            self.y[k],
            self.y[k + 1],
            self.d[k],
            self.d[k + 1],
        );
        (y, ld)
    }

    /// `(x, ln dy/dx at x)` for the `x` with `forward(x).0 == y`.
    pub fn inverse(&self, y: f64) -> (f64, f64) {
        let b = self.bound();
        if y <= -b || y >= b {
            return (y, 0.0);
        }
        let k = Self::bin(&self.y, y);
        rq_inverse(
            y,
            self.x[k],
            self.x[k + 1],
            self.y[k],
            self.y[k + 1],
            self.d[k],
            self.d[k + 1],
        )
    }
}

/// Forward map inside one bin. Returns `(y, ln derivative)`.
pub(crate) fn rq_forward<T: Real>(x: T, x0: T, x1: T, y0: T, y1: T, d0: T, d1: T) -> (T, T) {
    let w = x1 - x0;
    let h = y1 - y0;
    let s = h / w;
    let xi = (x - x0) / w;
    let om = -xi + 1.0;
    let xo = xi * om;
    let den = s + (d1 + d0 - s * 2.0) * xo;
    let y = y0 + h * (s * xi * xi + d0 * xo) / den;
    let num = s * s * (d1 * xi * xi + s * xo * 2.0 + d0 * om * om);
    (y, num.ln() - den.ln() * 2.0)
}

/// Inverse map inside one bin. Returns `(x, ln forward derivative at x)`.
pub(crate) fn rq_inverse<T: Real>(y: T, x0: T, x1: T, y0: T, y1: T, d0: T, d1: T) -> (T, T) {
    let w = x1 - x0;
    let h = y1 - y0;
    let s = h / w;
    let dy = y - y0;
    let c2 = d1 + d0 - s * 2.0;
    let a = h * (s - d0) + dy * c2;
    let b = h * d0 - dy * c2;
    let c = -(s * dy);
    let disc = b * b - a * c * 4.0;
    // clamp tiny negative discriminants caused by rounding
    let disc = if disc.value() < 0.0 { T::cst(0.0) } else { disc };
    let xi = (c * 2.0) / (-b - disc.sqrt());
    let x = x0 + xi * w;
    let om = -xi + 1.0;
    let xo = xi * om;
    let den = s + c2 * xo;
    let num = s * s * (d1 * xi * xi + s * xo * 2.0 + d0 * om * om);
    (x, num.ln() - den.ln() * 2.0)
}

/// Log-density of `z = mu + sigma * spline(u)`, `u ~ N(0, 1)`, together with
/// its gradient with respect to `(mu, log_sigma, raw spline parameters)`.
pub(crate) fn log_density_with_grad(
    z: f64,
    mu: f64,
    log_sigma: f64,
    raw: &[f64],
    bins: usize,
    bound: f64,
) -> Result<(f64, Vec<f64>)> {
    let knots = Knots::from_raw(raw, bins, bound)?;
    let mut grad = vec![0.0; 2 + raw_len(bins)];
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();

    // seeds: 0..6 bin-local knots, 6 = mu, 7 = log sigma
    let mu_d = Dual::<8>::seed(mu, 6);
    let ls_d = Dual::<8>::seed(log_sigma, 7);
    let y = (Dual::constant(z) - mu_d) / ls_d.exp();
    let b = bound;
    let (logp, bin) = if y.v <= -b || y.v >= b {
        (-(y * y) * 0.5 - half_ln_2pi - ls_d, None)
    } else {
        let k = Knots::bin(&knots.y, y.v);
        let s = |i: usize, v: f64| Dual::<8>::seed(v, i);
        let (u, ld) = rq_inverse(
            y,
            s(0, knots.x[k]),
            s(1, knots.x[k + 1]),
            s(2, knots.y[k]),
            s(3, knots.y[k + 1]),
            s(4, knots.d[k]),
            s(5, knots.d[k + 1]),
        );
        (-(u * u) * 0.5 - half_ln_2pi - ld - ls_d, Some(k))
    };
    grad[0] = logp.d[6];
    grad[1] = logp.d[7];

    if let Some(k) = bin {
        let (_, sw) = cumulative(&raw[..bins], bound);
        let (_, sh) = cumulative(&raw[bins..2 * bins], bound);
        let scale = 2.0 * bound * (1.0 - bins as f64 * MIN_BIN);
        // d knot_j / d raw_m = scale * s_m * ([m < j] - S_j), S_j = sum_{i<j} s_i
        let knot_grad = |j: usize, s: &[f64], g_knot: f64, out: &mut [f64]| {
            if j == 0 || j == bins || g_knot == 0.0 {
                return;
            }
            let big_s: f64 = s[..j].iter().sum();
            for m in 0..bins {
                let ind = if m < j { 1.0 } else { 0.0 };
                out[m] += g_knot * scale * s[m] * (ind - big_s);
            }
        };
        let (gw, rest) = grad[2..].split_at_mut(bins);
        let (gh, gd) = rest.split_at_mut(bins);
        knot_grad(k, &sw, logp.d[0], gw);
        knot_grad(k + 1, &sw, logp.d[1], gw);
        knot_grad(k, &sh, logp.d[2], gh);
        knot_grad(k + 1, &sh, logp.d[3], gh);
        let off = derivative_offset();
        for (j, seed) in [(k, 4usize), (k + 1, 5)] {
            if j >= 1 && j < bins {
                let r = raw[2 * bins + j - 1] + off;
                gd[j - 1] += logp.d[seed] * r.sigmoid();
            }
        }
    }
    Ok((logp.v, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_knots(rng: &mut ChaCha8Rng, bins: usize) -> Knots {
        let raw: Vec<f64> = (0..raw_len(bins)).map(|_| rng.random_range(-2.0..2.0)).collect();
        Knots::from_raw(&raw, bins, 4.0).unwrap()
    }

    #[test]
    fn zero_parameters_give_identity() {
        let k = Knots::from_raw(&vec![0.0; raw_len(8)], 8, 4.0).unwrap();
        for x in [-5.0, -3.9, -1.0, 0.0, 0.3, 2.2, 3.99, 7.0] {
            let (y, ld) = k.forward(x);
            assert!((y - x).abs() < 1e-12, "{x} -> {y}");
            assert!(ld.abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let k = random_knots(&mut rng, 8);
            for _ in 0..50 {
                let x: f64 = rng.random_range(-6.0..6.0);
                let (y, ld) = k.forward(x);
                let (xb, ldb) = k.inverse(y);
                assert!((xb - x).abs() < 1e-7, "{x} vs {xb}");
                assert!((ld - ldb).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn log_derivative_matches_finite_difference_and_is_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = random_knots(&mut rng, 8);
        for i in 0..1000 {
            let x = -4.5 + 9.0 * i as f64 / 999.0;
            let h = 1e-6;
            let fd = (k.forward(x + h).0 - k.forward(x - h).0) / (2.0 * h);
            assert!(fd > 0.0);
            if (x.abs() - 4.0).abs() > 1e-3 {
                assert!((fd.ln() - k.forward(x).1).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(Knots::from_raw(&[0.0; 5], 8, 4.0).is_err());
        assert!(Knots::new(vec![0.0, 1.0, 1.0], vec![0.0, 1.0, 2.0], vec![1.0; 3]).is_err());
        assert!(Knots::new(vec![0.0, 1.0, 2.0], vec![0.0, 1.0, 2.0], vec![1.0, -1.0, 1.0]).is_err());
    }

    #[test]
    fn density_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bins = 6;
        for _ in 0..10 {
            let mut p: Vec<f64> = (0..2 + raw_len(bins)).map(|_| rng.random_range(-1.0..1.0)).collect();
            p[1] *= 0.3;
            let z: f64 = rng.random_range(-3.0..3.0);
            let f = |p: &[f64]| log_density_with_grad(z, p[0], p[1], &p[2..], bins, 4.0).unwrap().0;
            let (_, g) = log_density_with_grad(z, p[0], p[1], &p[2..], bins, 4.0).unwrap();
            for i in 0..p.len() {
                let h = 1e-6;
                let mut a = p.clone();
                a[i] += h;
                let mut b = p.clone();
                b[i] -= h;
                let fd = (f(&a) - f(&b)) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "param {i}: fd {fd} vs {}", g[i]);
            }
        }
    }
}
