use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Exogenous per-voxel noise, i.i.d. standard normal when expanded from a seed.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseField {
    pub dims: [usize; 3],
    pub values: Vec<f64>,
}

impl NoiseField {
    pub fn zeros(dims: [usize; 3]) -> Self {
        NoiseField {
            dims,
            values: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_seed(dims: [usize; 3], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        NoiseField {
            dims,
            values: (0..n).map(|_| StandardNormal.sample(&mut rng)).collect(),
        }
    }
}

/// `A(n) = eps * (K n)` with `K` a separable, normalized, zero-padded
/// Gaussian blur. `K` is symmetric, so `A` is self-adjoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseOperator {
    pub sigma_voxels: f64,
    pub radius: usize,
    pub amplitude: f64,
    kernel: Vec<f64>,
}

impl Default for NoiseOperator {
    fn default() -> Self {
        Self::new(1.5, 5, 0.02)
    }
}

impl NoiseOperator {
    pub fn new(sigma_voxels: f64, radius: usize, amplitude: f64) -> Self {
        let raw: Vec<f64> = (0..=2 * radius)
            .map(|i| {
                let x = i as f64 - radius as f64;
                (-x * x / (2.0 * sigma_voxels * sigma_voxels)).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        NoiseOperator {
            sigma_voxels,
            radius,
            amplitude,
            kernel: raw.iter().map(|k| k / total).collect(),
        }
    }

    /// One-dimensional taps; they sum to one.
    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }

    /// The blur along one axis of length `n` as a dense row-major matrix.
    pub fn axis_matrix(&self, n: usize) -> Vec<f64> {
        let r = self.radius as isize;
        let mut m = vec![0.0; n * n];
        for t in 0..n as isize {
            for s in (t - r).max(0)..=(t + r).min(n as isize - 1) {
                m[t as usize * n + s as usize] = self.kernel[(s - t + r) as usize];
            }
        }
        m
    }

    pub fn apply(&self, n: &NoiseField) -> Vec<f64> {
        let mut out = self.blur(&n.values, n.dims);
        for v in &mut out {
            *v *= self.amplitude;
        }
        out
    }

    pub fn apply_checked(&self, n: &NoiseField, dims: [usize; 3]) -> Result<Vec<f64>> {
        if n.dims != dims || n.values.len() != dims.iter().product::<usize>() {
            return Err(Error::Dimension {
                expected: format!("{dims:?}"),
                got: format!("{:?} ({} values)", n.dims, n.values.len()),
            });
        }
        Ok(self.apply(n))
    }

    /// Unscaled blur `K x`.
    pub fn blur(&self, x: &[f64], dims: [usize; 3]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.blur_into(x, &mut out, dims);
        out
    }

    /// `K x` written into `out`, which must have the same length as `x`.
    pub fn blur_into(&self, x: &[f64], out: &mut [f64], dims: [usize; 3]) {
        let [nx, ny, nz] = dims;
        let mut tmp = vec![0.0; x.len()];
        // x axis: per element, straight into out
        for (src, dst) in x.chunks_exact(nx).zip(out.chunks_exact_mut(nx)) {
            self.blur_line(src, dst);
        }
        // y axis: whole rows at a time
        tmp.iter_mut().for_each(|v| *v = 0.0);
        for z in 0..nz {
            let plane = z * nx * ny;
            self.blur_rows(&out[plane..plane + nx * ny], &mut tmp[plane..plane + nx * ny], nx, ny);
        }
        // z axis: whole planes at a time
        out.iter_mut().for_each(|v| *v = 0.0);
        self.blur_rows(&tmp, out, nx * ny, nz);
    }

    fn blur_line(&self, src: &[f64], dst: &mut [f64]) {
        let n = src.len() as isize;
        let r = self.radius as isize;
        for t in 0..n {
            let lo = (-r).max(-t);
            let hi = r.min(n - 1 - t);
            let mut acc = 0.0;
            for o in lo..=hi {
                acc += self.kernel[(o + r) as usize] * src[(t + o) as usize];
            }
            dst[t as usize] = acc;
        }
    }

    /// Blurs along the slowest axis of a `count x len` block; `dst` must be zeroed.
    fn blur_rows(&self, src: &[f64], dst: &mut [f64], len: usize, count: usize) {
        let r = self.radius as isize;
        for t in 0..count as isize {
            let out = &mut dst[t as usize * len..(t as usize + 1) * len];
            for o in (-r).max(-t)..=r.min(count as isize - 1 - t) {
                let k = self.kernel[(o + r) as usize];
                let row = &src[(t + o) as usize * len..(t + o + 1) as usize * len];
                for (d, s) in out.iter_mut().zip(row) {
                    *d += k * s;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DIMS: [usize; 3] = [12, 10, 14];

    #[test]
    fn axis_matrices_reproduce_the_blur() {
        let op = NoiseOperator::default();
        let n = NoiseField::from_seed(DIMS, 4);
        let [nx, ny, nz] = DIMS;
        let (mx, my, mz) = (op.axis_matrix(nx), op.axis_matrix(ny), op.axis_matrix(nz));
        let fast = op.blur(&n.values, DIMS);
        let idx = |x: usize, y: usize, z: usize| (z * ny + y) * nx + x;
        for &(x, y, z) in &[(0, 0, 0), (5, 3, 7), (11, 9, 13), (2, 8, 1)] {
            let mut acc = 0.0;
            for c in 0..nz {
                for b in 0..ny {
                    for a in 0..nx {
                        acc += mx[x * nx + a] * my[y * ny + b] * mz[z * nz + c] * n.values[idx(a, b, c)];
                    }
                }
            }
            assert!((acc - fast[idx(x, y, z)]).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_maps_to_zero() {
        let op = NoiseOperator::default();
        assert!(op.apply(&NoiseField::zeros(DIMS)).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear() {
        let op = NoiseOperator::default();
        let a = NoiseField::from_seed(DIMS, 1);
        let b = NoiseField::from_seed(DIMS, 2);
        let (al, be) = (0.7, -1.9);
        let mix = NoiseField {
            dims: DIMS,
            values: a.values.iter().zip(&b.values).map(|(x, y)| al * x + be * y).collect(),
        };
        let lhs = op.apply(&mix);
        let (ra, rb) = (op.apply(&a), op.apply(&b));
        for i in 0..lhs.len() {
            assert!((lhs[i] - (al * ra[i] + be * rb[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn impulse_response_is_the_scaled_kernel() {
        let op = NoiseOperator::default();
        let mut n = NoiseField::zeros(DIMS);
        let idx = |x: usize, y: usize, z: usize| (z * DIMS[1] + y) * DIMS[0] + x;
        n.values[idx(6, 5, 7)] = 1.0;
        let out = op.apply(&n);
        let s2 = 2.0 * 1.5 * 1.5;
        let norm: f64 = (-5..=5).map(|i: i32| (-(i * i) as f64 / s2).exp()).sum();
        for z in 0..DIMS[2] {
            for y in 0..DIMS[1] {
                for x in 0..DIMS[0] {
                    let d = [x as i32 - 6, y as i32 - 5, z as i32 - 7];
                    let want = if d.iter().all(|v| v.abs() <= 5) {
                        0.02 * d.iter().map(|&v| (-(v * v) as f64 / s2).exp() / norm).product::<f64>()
                    } else {
                        0.0
                    };
                    assert!((out[idx(x, y, z)] - want).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn operator_is_self_adjoint_and_bounded() {
        let op = NoiseOperator::default();
        let a = NoiseField::from_seed(DIMS, 3);
        let b = NoiseField::from_seed(DIMS, 4);
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
        let lhs = dot(&op.apply(&a), &b.values);
        let rhs = dot(&a.values, &op.apply(&b));
        assert!((lhs - rhs).abs() < 1e-10);
        let sup = a.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let ksum: f64 = op.kernel().iter().sum::<f64>().powi(3);
        assert!(op.apply(&a).iter().all(|v| v.abs() <= 0.02 * sup * ksum + 1e-15));
        assert!(op.apply_checked(&a, [1, 2, 3]).is_err());
    }

    #[test]
    fn expansion_is_deterministic() {
        assert_eq!(NoiseField::from_seed(DIMS, 9), NoiseField::from_seed(DIMS, 9));
        assert_ne!(NoiseField::from_seed(DIMS, 9), NoiseField::from_seed(DIMS, 10));
    }
}
