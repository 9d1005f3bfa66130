use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mechanisms::DenseNet;

pub const MAPPING_SEED: u64 = 0x00ad_5eed;
const OUTPUT_SCALE: f64 = 0.6;

/// Fixed, never-trained network `z -> w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingNetwork {
    pub seed: u64,
    net: DenseNet,
}

impl Default for MappingNetwork {
    fn default() -> Self {
        Self::new(super::decoder::DEFAULT_STYLE_DIM, MAPPING_SEED)
    }
}

impl MappingNetwork {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes = [dim, 32, 32, dim];
        let mut net = DenseNet::new(&sizes, OUTPUT_SCALE, &mut rng);
        // small random biases so z = 0 maps to a nontrivial constant
        let mut off = 0;
        for w in sizes.windows(2) {
            off += w[0] * w[1];
            for b in &mut net.params_mut()[off..off + w[1]] {
                *b = rng.random_range(-0.1..0.1);
            }
            off += w[1];
        }
        MappingNetwork { seed, net }
    }

    pub fn dim(&self) -> usize {
        self.net.n_inputs()
    }

    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim() {
            return Err(Error::Dimension {
                expected: format!("latent of length {}", self.dim()),
                got: z.len().to_string(),
            });
        }
        Ok(self.net.forward(z))
    }
}
