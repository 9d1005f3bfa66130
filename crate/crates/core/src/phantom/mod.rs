//! Styled voxel phantom generator `I = G(w, n)`.
//!
//! A fixed decoder turns the style vector into nested-ellipsoid geometry
//! (brain, inner white-matter core, ventricle), which is rasterized with
//! one-voxel anti-aliased boundaries; exogenous noise enters through a
//! fixed linear smoothing operator. All volumes are known analytically.

mod decoder;
mod mapping;
mod measure;
mod noise;
mod raster;

use serde::{Deserialize, Serialize};

pub use decoder::{
    Decoder, ShapeParams, CALIBRATION_ML, DECODER_SEED, DEFAULT_STYLE_DIM, N_PARAMS, PARAM_NAMES,
};
pub use mapping::{MappingNetwork, MAPPING_SEED};
pub use measure::{measure_volumes, segment, Segmentation};
pub use noise::{NoiseField, NoiseOperator};
pub(crate) use raster::visit_intensity;
pub use raster::{rasterize, BACKGROUND, CSF, GREY_MATTER, WHITE_MATTER};

use crate::error::{Error, Result};

pub const VOLUME_NAMES: [&str; 3] = ["brain", "gm", "ventricle"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub spacing_mm: f64,
}

impl Default for GridSpec {
    /// 64³ at 3.2 mm: a 204.8 mm field of view.
    fn default() -> Self {
        GridSpec::cube(64, 3.2)
    }
}

impl GridSpec {
    pub fn cube(n: usize, spacing_mm: f64) -> Self {
        GridSpec {
            dims: [n; 3],
            spacing_mm,
        }
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) || !(self.spacing_mm > 0.0 && self.spacing_mm.is_finite()) {
            return Err(Error::Dimension {
                expected: "positive grid dims and spacing".into(),
                got: format!("{:?} at {} mm", self.dims, self.spacing_mm),
            });
        }
        Ok(())
    }

    pub fn voxel_ml(&self) -> f64 {
        self.spacing_mm.powi(3) / 1000.0
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    /// Voxel centre in mm, with the grid centred on the origin.
    pub fn position(&self, idx: [usize; 3]) -> [f64; 3] {
        std::array::from_fn(|k| (idx[k] as f64 + 0.5 - self.dims[k] as f64 / 2.0) * self.spacing_mm)
    }

    /// Index range along axis `k` whose centres fall in `[lo, hi]` mm.
    pub fn index_range(&self, lo: f64, hi: f64, k: usize) -> (usize, usize) {
        let n = self.dims[k] as f64;
        let to_idx = |mm: f64| mm / self.spacing_mm + n / 2.0 - 0.5;
        let a = to_idx(lo).ceil().max(0.0) as usize;
        let b = (to_idx(hi).floor() + 1.0).clamp(0.0, n) as usize;
        (a.min(self.dims[k]), b)
    }
}

/// Scalar image on a regular grid, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub dims: [usize; 3],
    pub spacing_mm: f64,
    pub data: Vec<f32>,
}

impl VoxelGrid {
    pub fn zeros(spec: GridSpec) -> Self {
        VoxelGrid {
            dims: spec.dims,
            spacing_mm: spec.spacing_mm,
            data: vec![0.0; spec.len()],
        }
    }

    /// Clamps to [0, 1] while converting.
    pub fn from_f64(spec: GridSpec, values: &[f64]) -> Self {
        VoxelGrid {
            dims: spec.dims,
            spacing_mm: spec.spacing_mm,
            data: values.iter().map(|v| v.clamp(0.0, 1.0) as f32).collect(),
        }
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec {
            dims: self.dims,
            spacing_mm: self.spacing_mm,
        }
    }

    pub fn voxel_ml(&self) -> f64 {
        self.spec().voxel_ml()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.spec().index(x, y, z)]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

/// Decoder, noise operator and grid bundled as the generator `G`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhantomGenerator {
    pub decoder: Decoder,
    pub noise: NoiseOperator,
    pub grid: GridSpec,
}

impl PhantomGenerator {
    pub fn with_grid(grid: GridSpec) -> Self {
        PhantomGenerator {
            grid,
            ..Self::default()
        }
    }

    pub fn style_dim(&self) -> usize {
        self.decoder.style_dim
    }

    /// Noiseless intensities `raster(decode(w))`, unclamped, as f64.
    pub fn raster(&self, w: &[f64]) -> Result<Vec<f64>> {
        self.grid.validate()?;
        rasterize(&self.decoder.decode(w)?, &self.grid)
    }

    /// `G(w, 0)`.
    pub fn render(&self, w: &[f64]) -> Result<VoxelGrid> {
        Ok(VoxelGrid::from_f64(self.grid, &self.raster(w)?))
    }

    /// `G(w, n) = clamp01(raster(decode(w)) + A n)`.
    pub fn generate(&self, w: &[f64], n: &NoiseField) -> Result<VoxelGrid> {
        let mut img = self.raster(w)?;
        let an = self.noise.apply_checked(n, self.grid.dims)?;
        for (v, a) in img.iter_mut().zip(&an) {
            *v += a;
        }
        Ok(VoxelGrid::from_f64(self.grid, &img))
    }

    pub fn noise_from_seed(&self, seed: u64) -> NoiseField {
        NoiseField::from_seed(self.grid.dims, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_bitwise_reproducible() {
        let g = PhantomGenerator::default();
        let w = [0.1, 0.2, -0.3, 0.0, 0.5, -0.5, 0.2, 0.1];
        let n = g.noise_from_seed(3);
        assert_eq!(g.generate(&w, &n).unwrap(), g.generate(&w, &n).unwrap());
    }

    #[test]
    fn noiseless_generation_equals_render() {
        let g = PhantomGenerator::default();
        let w = [0.0; 8];
        let zero = NoiseField::zeros(g.grid.dims);
        assert_eq!(g.generate(&w, &zero).unwrap(), g.render(&w).unwrap());
        assert!(g.generate(&w, &NoiseField::zeros([4, 4, 4])).is_err());
    }

    #[test]
    fn index_range_covers_interval() {
        let g = GridSpec::cube(10, 1.0);
        assert_eq!(g.index_range(-1.0, 1.0, 0), (4, 6));
        assert_eq!(g.index_range(-100.0, 100.0, 0), (0, 10));
    }
}
