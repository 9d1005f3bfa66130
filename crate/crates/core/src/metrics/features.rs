use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::VoxelGrid;

pub const FEATURE_DIM: usize = 64;
pub const FEATURE_SEED: u64 = 0xfea7_0001;
const BLOCKS: usize = 8;
const STATS: usize = 3;

/// Block statistics (mean, std, mean gradient magnitude on an 8^3 block
/// grid) under a fixed Gaussian random projection to 64 dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    pub seed: u64,
    pub dims: [usize; 3],
    #[serde(skip)]
    projection: Vec<f64>,
}

fn block_of(i: usize, n: usize) -> usize {
    i * BLOCKS / n
}

impl FeatureExtractor {
    pub fn new(dims: [usize; 3], seed: u64) -> Result<Self> {
        if dims.iter().any(|&n| n < BLOCKS) {
            return Err(Error::Dimension {
                expected: format!("every axis at least {BLOCKS}"),
                got: format!("{dims:?}"),
            });
        }
        let inputs = BLOCKS * BLOCKS * BLOCKS * STATS;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (inputs as f64).sqrt();
        let projection = (0..FEATURE_DIM * inputs)
            .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        Ok(FeatureExtractor { seed, dims, projection })
    }

    fn block_stats(&self, image: &VoxelGrid) -> Vec<f64> {
        let [nx, ny, nz] = self.dims;
        let nb = BLOCKS * BLOCKS * BLOCKS;
        let mut count = vec![0.0; nb];
        let mut sum = vec![0.0; nb];
        let mut sq = vec![0.0; nb];
        let mut grad = vec![0.0; nb];
        let at = |x: usize, y: usize, z: usize| f64::from(image.data[(z * ny + y) * nx + x]);
        // central differences, one-sided at the faces
        let diff = |lo: f64, hi: f64, span: usize| (hi - lo) / span.max(1) as f64;
        for z in 0..nz {
            let (z0, z1) = (z.saturating_sub(1), (z + 1).min(nz - 1));
            for y in 0..ny {
                let (y0, y1) = (y.saturating_sub(1), (y + 1).min(ny - 1));
                for x in 0..nx {
                    let (x0, x1) = (x.saturating_sub(1), (x + 1).min(nx - 1));
                    let v = at(x, y, z);
                    let gx = diff(at(x0, y, z), at(x1, y, z), x1 - x0);
                    let gy = diff(at(x, y0, z), at(x, y1, z), y1 - y0);
                    let gz = diff(at(x, y, z0), at(x, y, z1), z1 - z0);
                    let b = (block_of(z, nz) * BLOCKS + block_of(y, ny)) * BLOCKS + block_of(x, nx);
                    count[b] += 1.0;
                    sum[b] += v;
                    sq[b] += v * v;
                    grad[b] += (gx * gx + gy * gy + gz * gz).sqrt();
                }
            }
        }
        let mut out = Vec::with_capacity(nb * STATS);
        for b in 0..nb {
            let m = sum[b] / count[b];
            out.push(m);
            out.push((sq[b] / count[b] - m * m).max(0.0).sqrt());
            out.push(grad[b] / count[b]);
        }
        out
    }

    pub fn extract(&self, image: &VoxelGrid) -> Result<Vec<f64>> {
        if image.dims != self.dims || image.data.len() != self.dims.iter().product::<usize>() {
            return Err(Error::Dimension {
                expected: format!("{:?}", self.dims),
                got: format!("{:?}", image.dims),
            });
        }
        let projection = if self.projection.is_empty() {
            // deserialized extractors rebuild their projection
            FeatureExtractor::new(self.dims, self.seed)?.projection
        } else {
            self.projection.clone()
        };
        let stats = self.block_stats(image);
        Ok(projection
            .chunks_exact(stats.len())
            .map(|row| row.iter().zip(&stats).map(|(p, s)| p * s).sum())
            .collect())
    }
}
