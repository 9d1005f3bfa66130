use std::collections::VecDeque;

use super::raster::{CSF, GREY_MATTER, WHITE_MATTER};
use super::VoxelGrid;

const OUTER: f64 = 0.5 * GREY_MATTER;
const INNER: f64 = 0.5 * (GREY_MATTER + WHITE_MATTER);
const VENT: f64 = 0.5 * (WHITE_MATTER + CSF);

fn neighbours(i: usize, dims: [usize; 3]) -> impl Iterator<Item = usize> {
    let [nx, ny, nz] = dims;
    let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
    let plane = nx * ny;
    [
        (x > 0).then(|| i - 1),
        (x + 1 < nx).then(|| i + 1),
        (y > 0).then(|| i - nx),
        (y + 1 < ny).then(|| i + nx),
        (z > 0).then(|| i - plane),
        (z + 1 < nz).then(|| i + plane),
    ]
    .into_iter()
    .flatten()
}

fn flood(seeds: impl IntoIterator<Item = usize>, dims: [usize; 3], pass: impl Fn(usize) -> bool) -> Vec<bool> {
    let n = dims.iter().product();
    let mut seen = vec![false; n];
    let mut queue = VecDeque::new();
    for s in seeds {
        if pass(s) && !seen[s] {
            seen[s] = true;
            queue.push_back(s);
        }
    }
    while let Some(i) = queue.pop_front() {
        for j in neighbours(i, dims) {
            if !seen[j] && pass(j) {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    seen
}

fn border(dims: [usize; 3]) -> Vec<usize> {
    let [nx, ny, nz] = dims;
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if x == 0 || y == 0 || z == 0 || x + 1 == nx || y + 1 == ny || z + 1 == nz {
                    out.push((z * ny + y) * nx + x);
                }
            }
        }
    }
    out
}

/// Tissue fraction at a labelled interface: voxels on either side of the
/// boundary between `inside` and its complement get the fraction implied by
/// linear mixing of the two bands; all others get their label.
fn interface_fraction(inside: &[bool], img: &[f32], dims: [usize; 3], band_in: f64, band_out: f64) -> Vec<f64> {
    (0..inside.len())
        .map(|i| {
            let at_edge = neighbours(i, dims).any(|j| inside[j] != inside[i]);
            if at_edge {
                ((f64::from(img[i]) - band_out) / (band_in - band_out)).clamp(0.0, 1.0)
            } else if inside[i] {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Per-voxel partial-volume fractions of the brain, the inner (white matter
/// plus ventricle) region and the ventricle.
#[derive(Debug, Clone)]
pub struct Segmentation {
    pub brain: Vec<f64>,
    pub inner: Vec<f64>,
    pub ventricle: Vec<f64>,
}

impl Segmentation {
    pub fn volumes_ml(&self, voxel_ml: f64) -> [f64; 3] {
        let sum = |v: &[f64]| v.iter().sum::<f64>() * voxel_ml;
        let (b, i, v) = (sum(&self.brain), sum(&self.inner), sum(&self.ventricle));
        [b, b - i, v]
    }
}

/// Segments tissues at the midpoints between adjacent intensity bands.
///
/// Background is everything connected to the grid border below the
/// background/grey-matter midpoint; the inner region is grown from the dark
/// ventricle and the grid centre below the grey/white midpoint. Voxels on
/// each segmented interface then get the partial volume implied by their
/// intensity.
pub fn segment(image: &VoxelGrid) -> Segmentation {
    let dims = image.dims;
    let img = &image.data;
    if img.is_empty() {
        return Segmentation {
            brain: vec![],
            inner: vec![],
            ventricle: vec![],
        };
    }
    let v = |i: usize| f64::from(img[i]);
    let background = flood(border(dims), dims, |i| v(i) < OUTER);
    let brain: Vec<bool> = background.iter().map(|b| !b).collect();
    let ventricle: Vec<bool> = (0..img.len()).map(|i| brain[i] && v(i) < VENT).collect();
    let centre = (dims[2] / 2 * dims[1] + dims[1] / 2) * dims[0] + dims[0] / 2;
    let seeds = (0..img.len()).filter(|&i| ventricle[i]).chain(std::iter::once(centre));
    let inner = flood(seeds, dims, |i| brain[i] && v(i) < INNER);
    Segmentation {
        brain: interface_fraction(&brain, img, dims, GREY_MATTER, 0.0),
        inner: interface_fraction(&inner, img, dims, WHITE_MATTER, GREY_MATTER),
        ventricle: interface_fraction(&ventricle, img, dims, CSF, WHITE_MATTER),
    }
}

/// (brain, grey matter, ventricle) in ml from [`segment`].
pub fn measure_volumes(image: &VoxelGrid) -> [f64; 3] {
    if image.data.is_empty() {
        return [0.0; 3];
    }
    segment(image).volumes_ml(image.voxel_ml())
}
