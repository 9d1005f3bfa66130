use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::VoxelGrid;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median pairwise distance over the pooled batches.
    #[default]
    Median,
    Fixed(f64),
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn median_bandwidth(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let pooled: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let mut d = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    if m == 0 {
        return 1.0;
    }
    let med = if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) };
    if med > 0.0 { med } else { 1.0 }
}

/// Unbiased MMD^2 with a Gaussian kernel `exp(-d^2 / (2 h^2))`.
///
/// Equal batch sizes use the paired U-statistic, which also drops the
/// `i = j` cross terms, so identical batches give exactly zero.
pub fn mmd2(a: &[Vec<f64>], b: &[Vec<f64>], bandwidth: Bandwidth) -> Result<f64> {
    let (m, n) = (a.len(), b.len());
    if m < 2 || n < 2 {
        return Err(Error::BatchTooSmall { need: 2, got: m.min(n) });
    }
    let dim = a[0].len();
    if let Some(bad) = a.iter().chain(b).find(|v| v.len() != dim) {
        return Err(Error::Dimension {
            expected: format!("{dim} features"),
            got: bad.len().to_string(),
        });
    }
    let h = match bandwidth {
        Bandwidth::Median => median_bandwidth(a, b),
        Bandwidth::Fixed(h) if h > 0.0 && h.is_finite() => h,
        Bandwidth::Fixed(h) => return Err(Error::InvalidConfig(format!("bandwidth {h} must be positive"))),
    };
    let gamma = 1.0 / (2.0 * h * h);
    let k = |x: &[f64], y: &[f64]| (-gamma * sq_dist(x, y)).exp();
    let within = |s: &[Vec<f64>]| {
        let mut t = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    t += k(&s[i], &s[j]);
                }
            }
        }
        t / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for i in 0..m {
        for j in 0..n {
            if m != n || i != j {
                cross += k(&a[i], &b[j]);
            }
        }
    }
    let pairs = if m == n { m * (m - 1) } else { m * n };
    Ok(within(a) + within(b) - 2.0 * cross / pairs as f64)
}

/// Trilinear resampling onto `dims` (cell-centre aligned).
pub fn downsample(image: &VoxelGrid, dims: [usize; 3]) -> Vec<f64> {
    let src = image.dims;
    let coord = |i: usize, k: usize| -> (usize, usize, f64) {
        let x = ((i as f64 + 0.5) * src[k] as f64 / dims[k] as f64 - 0.5).clamp(0.0, (src[k] - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(src[k] - 1);
        (lo, hi, x - lo as f64)
    };
    let at = |x: usize, y: usize, z: usize| f64::from(image.data[(z * src[1] + y) * src[0] + x]);
    let mut out = Vec::with_capacity(dims.iter().product());
    for z in 0..dims[2] {
        let (z0, z1, fz) = coord(z, 2);
        for y in 0..dims[1] {
            let (y0, y1, fy) = coord(y, 1);
            for x in 0..dims[0] {
                let (x0, x1, fx) = coord(x, 0);
                let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
                let c00 = lerp(at(x0, y0, z0), at(x1, y0, z0), fx);
                let c10 = lerp(at(x0, y1, z0), at(x1, y1, z0), fx);
                let c01 = lerp(at(x0, y0, z1), at(x1, y0, z1), fx);
                let c11 = lerp(at(x0, y1, z1), at(x1, y1, z1), fx);
                out.push(lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz));
            }
        }
    }
    out
}

pub const BMMD_DIMS: [usize; 3] = [32, 32, 32];

/// MMD^2 over images flattened after resampling to 32^3.
pub fn bmmd2(a: &[VoxelGrid], b: &[VoxelGrid], bandwidth: Bandwidth) -> Result<f64> {
    let flat = |s: &[VoxelGrid]| s.iter().map(|i| downsample(i, BMMD_DIMS)).collect::<Vec<_>>();
    mmd2(&flat(a), &flat(b), bandwidth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::GridSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn draw(n: usize, mu: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let d = Normal::new(mu, 1.0).unwrap();
        (0..n).map(|_| vec![d.sample(rng)]).collect()
    }

    #[test]
    fn identical_batches_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<Vec<f64>> = (0..30).map(|_| draw(1, 0.0, &mut rng).remove(0).repeat(3)).collect();
        assert!(mmd2(&a, &a, Bandwidth::Median).unwrap().abs() < 1e-12);
    }

    #[test]
    fn shifted_gaussians_match_the_closed_form() {
        // for N(0,1) vs N(3,1) and bandwidth h:
        // MMD^2 = 2 s (1 - exp(-9 / (2 (h^2 + 2)))), s = h / sqrt(h^2 + 2)
        let h: f64 = 1.5;
        let s = h / (h * h + 2.0).sqrt();
        let truth = 2.0 * s * (1.0 - (-9.0 / (2.0 * (h * h + 2.0))).exp());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = draw(500, 0.0, &mut rng);
        let b = draw(500, 3.0, &mut rng);
        let est = mmd2(&a, &b, Bandwidth::Fixed(h)).unwrap();
        assert!((est - truth).abs() < 0.1 * truth, "{est} vs {truth}");
        // unequal sizes use the full cross sum
        let est = mmd2(&a[..400], &b, Bandwidth::Fixed(h)).unwrap();
        assert!((est - truth).abs() < 0.1 * truth, "{est} vs {truth}");
    }

    #[test]
    fn permutation_p_values_are_uniform_under_the_null() {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = Vec::new();
        for _ in 0..100 {
            let a = draw(12, 0.0, &mut rng);
            let b = draw(12, 0.0, &mut rng);
            let obs = mmd2(&a, &b, Bandwidth::Fixed(1.0)).unwrap();
            let mut pooled: Vec<Vec<f64>> = a.into_iter().chain(b).collect();
            let mut hits = 0;
            for _ in 0..100 {
                pooled.shuffle(&mut rng);
                if mmd2(&pooled[..12], &pooled[12..], Bandwidth::Fixed(1.0)).unwrap() >= obs {
                    hits += 1;
                }
            }
            p.push((hits as f64 + 1.0) / 101.0);
        }
        p.sort_by(f64::total_cmp);
        let n = p.len() as f64;
        let ks = p
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - i as f64 / n).abs().max(((i + 1) as f64 / n - v).abs()))
            .fold(0.0, f64::max);
        assert!(ks < 0.15, "{ks}");
    }

    #[test]
    fn small_batches_are_rejected() {
        let a = vec![vec![0.0]];
        assert!(matches!(mmd2(&a, &a, Bandwidth::Median), Err(Error::BatchTooSmall { .. })));
    }

    #[test]
    fn downsampling_preserves_constants_and_halves_dims() {
        let img = VoxelGrid::from_f64(GridSpec::cube(8, 1.0), &[0.25; 512]);
        let d = downsample(&img, [4, 4, 4]);
        assert_eq!(d.len(), 64);
        assert!(d.iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }
}
