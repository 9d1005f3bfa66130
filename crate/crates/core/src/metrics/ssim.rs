use crate::error::{Error, Result};
use crate::phantom::VoxelGrid;

const RADIUS: usize = 3;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn window() -> [f64; 2 * RADIUS + 1] {
    let mut k = [0.0; 2 * RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - RADIUS as f64;
        *v = (-x * x / (2.0 * SIGMA * SIGMA)).exp();
    }
    let total: f64 = k.iter().sum();
    k.map(|v| v / total)
}

/// Valid-mode separable filtering; output dims shrink by `2 * RADIUS`.
fn filter_valid(x: &[f64], dims: [usize; 3], k: &[f64]) -> (Vec<f64>, [usize; 3]) {
    let w = k.len();
    let mut cur = x.to_vec();
    let mut d = dims;
    for axis in 0..3 {
        let mut nd = d;
        nd[axis] = d[axis] + 1 - w;
        let stride: usize = d[..axis].iter().product();
        let mut out = vec![0.0; nd.iter().product()];
        for z in 0..nd[2] {
            for y in 0..nd[1] {
                for xx in 0..nd[0] {
                    let src = (z * d[1] + y) * d[0] + xx;
                    let mut acc = 0.0;
                    for (t, kv) in k.iter().enumerate() {
                        acc += kv * cur[src + t * stride];
                    }
                    out[(z * nd[1] + y) * nd[0] + xx] = acc;
                }
            }
        }
        cur = out;
        d = nd;
    }
    (cur, d)
}

/// Mean local SSIM over every full 7^3 Gaussian window (sigma 1.5),
/// intensities on a unit dynamic range.
pub fn ssim3d(a: &VoxelGrid, b: &VoxelGrid) -> Result<f64> {
    if a.dims != b.dims || a.data.len() != b.data.len() {
        return Err(Error::Dimension {
            expected: format!("{:?}", a.dims),
            got: format!("{:?}", b.dims),
        });
    }
    if a.dims.iter().any(|&n| n < 2 * RADIUS + 1) {
        return Err(Error::Dimension {
            expected: format!("every axis at least {}", 2 * RADIUS + 1),
            got: format!("{:?}", a.dims),
        });
    }
    let k = window();
    let x = a.to_f64();
    let y = b.to_f64();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
    let (mx, _) = filter_valid(&x, a.dims, &k);
    let (my, _) = filter_valid(&y, a.dims, &k);
    let (sxx, _) = filter_valid(&prod(&x, &x), a.dims, &k);
    let (syy, _) = filter_valid(&prod(&y, &y), a.dims, &k);
    let (sxy, _) = filter_valid(&prod(&x, &y), a.dims, &k);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cxy = sxy[i] - ux * uy;
        let num = (2.0 * ux * uy + C1) * (2.0 * cxy + C2);
        let den = (ux * ux + uy * uy + C1) * (vx + vy + C2);
        total += num / den;
    }
    Ok(total / mx.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::GridSpec;

    fn grid(seed: u64) -> VoxelGrid {
        let spec = GridSpec::cube(12, 1.0);
        let vals: Vec<f64> = (0..spec.len())
            .map(|i| (((i as u64 * 2654435761 + seed * 97) % 1000) as f64) / 1000.0)
            .collect();
        VoxelGrid::from_f64(spec, &vals)
    }

    #[test]
    fn identity_and_symmetry() {
        let a = grid(1);
        let b = grid(2);
        assert_eq!(ssim3d(&a, &a).unwrap(), 1.0);
        assert_eq!(ssim3d(&a, &b).unwrap(), ssim3d(&b, &a).unwrap());
        assert!(ssim3d(&a, &b).unwrap() < 1.0);
    }

    #[test]
    fn single_voxel_change_lowers_ssim() {
        let a = grid(3);
        let mut b = a.clone();
        b.data[6 * 144 + 6 * 12 + 6] += 0.1;
        assert!(ssim3d(&a, &b).unwrap() < 1.0);
    }

    #[test]
    fn mismatched_dims_are_rejected() {
        let a = grid(1);
        let b = VoxelGrid::zeros(GridSpec::cube(10, 1.0));
        assert!(ssim3d(&a, &b).is_err());
    }
}
