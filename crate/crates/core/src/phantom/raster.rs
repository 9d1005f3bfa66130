use super::decoder::ShapeParams;
use super::GridSpec;
use crate::error::{Error, Result};

pub const BACKGROUND: f64 = 0.0;
pub const CSF: f64 = 0.25;
pub const WHITE_MATTER: f64 = 0.6;
pub const GREY_MATTER: f64 = 0.85;

#[derive(Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    inv_axes2: [f64; 3],
}

impl Ellipsoid {
    fn new(center: [f64; 3], axes: [f64; 3]) -> Self {
        Ellipsoid {
            center,
            inv_axes2: axes.map(|a| 1.0 / (a * a)),
        }
    }

    /// Fraction of a voxel of size `h` at `x` inside the ellipsoid, from a
    /// linear ramp across one voxel of the approximate signed distance.
    fn coverage(&self, x: [f64; 3], h: f64) -> f64 {
        let mut f = 0.0;
        let mut g2 = 0.0;
        for i in 0..3 {
            let r = x[i] - self.center[i];
            f += r * r * self.inv_axes2[i];
            let gi = r * self.inv_axes2[i];
            g2 += gi * gi;
        }
        if g2 == 0.0 {
            return 1.0;
        }
        // distance to the surface along the gradient of sqrt(f); exact for spheres
        let s = f.sqrt();
        let d = (s - 1.0) * s / g2.sqrt();
        (0.5 - d / h).clamp(0.0, 1.0)
    }
}

/// Per-voxel coverages of the brain, inner (white matter) and ventricle
/// ellipsoids, evaluated only inside the brain bounding box.
pub(crate) struct Coverages {
    pub brain: Vec<f64>,
    pub inner: Vec<f64>,
    pub ventricle: Vec<f64>,
}

pub(crate) fn check_fits(shape: &ShapeParams, grid: &GridSpec) -> Result<()> {
    for (k, axis) in ['x', 'y', 'z'].into_iter().enumerate() {
        let half = grid.dims[k] as f64 * grid.spacing_mm / 2.0;
        let extent = shape.brain_axes[k] + grid.spacing_mm;
        if extent > half {
            return Err(Error::GridTooSmall {
                axis,
                extent_mm: extent,
                half_fov_mm: half,
            });
        }
    }
    Ok(())
}

pub(crate) fn coverages(shape: &ShapeParams, grid: &GridSpec) -> Result<Coverages> {
    check_fits(shape, grid)?;
    let h = grid.spacing_mm;
    let brain = Ellipsoid::new([0.0; 3], shape.brain_axes);
    let inner = Ellipsoid::new([0.0; 3], shape.inner_axes());
    let vent = Ellipsoid::new([0.0, shape.ventricle_offset, 0.0], shape.ventricle_axes);
    let n = grid.len();
    let mut out = Coverages {
        brain: vec![0.0; n],
        inner: vec![0.0; n],
        ventricle: vec![0.0; n],
    };
    let range = |k: usize| {
        let (lo, hi) = grid.index_range(-shape.brain_axes[k] - h, shape.brain_axes[k] + h, k);
        lo..hi
    };
    for z in range(2) {
        for y in range(1) {
            for x in range(0) {
                let p = grid.position([x, y, z]);
                let cb = brain.coverage(p, h);
                if cb == 0.0 {
                    continue;
                }
                let i = grid.index(x, y, z);
                out.brain[i] = cb;
                let ci = inner.coverage(p, h);
                if ci > 0.0 {
                    out.inner[i] = ci;
                    out.ventricle[i] = vent.coverage(p, h);
                }
            }
        }
    }
    Ok(out)
}

/// Calls `f(index, intensity)` for every voxel of the brain bounding box whose
/// coordinates are multiples of `stride`; all other voxels are background.
pub(crate) fn visit_intensity(
    shape: &ShapeParams,
    grid: &GridSpec,
    stride: usize,
    mut f: impl FnMut(usize, f64),
) -> Result<()> {
    check_fits(shape, grid)?;
    let h = grid.spacing_mm;
    let brain = Ellipsoid::new([0.0; 3], shape.brain_axes);
    let inner = Ellipsoid::new([0.0; 3], shape.inner_axes());
    let vent = Ellipsoid::new([0.0, shape.ventricle_offset, 0.0], shape.ventricle_axes);
    let range = |k: usize| {
        let (lo, hi) = grid.index_range(-shape.brain_axes[k] - h, shape.brain_axes[k] + h, k);
        (lo.div_ceil(stride) * stride..hi).step_by(stride)
    };
    for z in range(2) {
        for y in range(1) {
            for x in range(0) {
                let p = grid.position([x, y, z]);
                let cb = brain.coverage(p, h);
                let mut v = GREY_MATTER * cb;
                if cb > 0.0 {
                    let ci = inner.coverage(p, h);
                    if ci > 0.0 {
                        v -= (GREY_MATTER - WHITE_MATTER) * ci + (WHITE_MATTER - CSF) * vent.coverage(p, h);
                    }
                }
                f(grid.index(x, y, z), v);
            }
        }
    }
    Ok(())
}

/// Noiseless tissue image: grey matter shell, white matter core, ventricle.
pub fn rasterize(shape: &ShapeParams, grid: &GridSpec) -> Result<Vec<f64>> {
    let c = coverages(shape, grid)?;
    Ok((0..grid.len())
        .map(|i| {
            GREY_MATTER * c.brain[i] - (GREY_MATTER - WHITE_MATTER) * c.inner[i] - (WHITE_MATTER - CSF) * c.ventricle[i]
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::Decoder;

    #[test]
    fn sphere_coverage_sums_to_volume() {
        let grid = GridSpec::cube(64, 2.0);
        let shape = ShapeParams {
            brain_axes: [40.0; 3],
            thickness: 10.0,
            ventricle_axes: [5.0; 3],
            ventricle_offset: 0.0,
            clamped: vec![],
        };
        let c = coverages(&shape, &grid).unwrap();
        let v: f64 = c.brain.iter().sum::<f64>() * 8.0;
        let want = 4.0 / 3.0 * std::f64::consts::PI * 40f64.powi(3);
        assert!((v / want - 1.0).abs() < 2e-3, "{v} vs {want}");
    }

    #[test]
    fn noiseless_bands() {
        let grid = GridSpec::default();
        let img = rasterize(&Decoder::default().decode(&[0.0; 8]).unwrap(), &grid).unwrap();
        for band in [BACKGROUND, CSF, WHITE_MATTER, GREY_MATTER] {
            assert!(img.iter().any(|&v| (v - band).abs() < 1e-12), "band {band}");
        }
        assert!(img.iter().all(|&v| (-1e-12..=1.0).contains(&v)));
    }

    #[test]
    fn visitor_matches_full_raster() {
        let grid = GridSpec::default();
        let shape = Decoder::default().decode(&[0.1, -0.2, 0.3, 0.0, 0.2, 0.1, -0.1, 0.4]).unwrap();
        let full = rasterize(&shape, &grid).unwrap();
        let mut seen = vec![f64::NAN; grid.len()];
        visit_intensity(&shape, &grid, 1, |i, v| seen[i] = v).unwrap();
        for i in 0..grid.len() {
            let v = if seen[i].is_nan() { 0.0 } else { seen[i] };
            assert!((v - full[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn overflow_names_the_axis() {
        let grid = GridSpec::cube(32, 2.0);
        let shape = Decoder::default().decode(&[0.0; 8]).unwrap();
        match rasterize(&shape, &grid) {
            Err(Error::GridTooSmall { axis, .. }) => assert_eq!(axis, 'x'),
            other => panic!("{other:?}"),
        }
    }
}
