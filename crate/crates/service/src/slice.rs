use std::str::FromStr;

use causal_voxel::phantom::VoxelGrid;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Sagittal,
    Coronal,
    Axial,
}

impl Axis {
    /// Index of the grid axis held fixed.
    pub fn fixed(self) -> usize {
        match self {
            Axis::Sagittal => 0,
            Axis::Coronal => 1,
            Axis::Axial => 2,
        }
    }

    /// In-plane (column, row) grid axes.
    pub fn plane(self) -> (usize, usize) {
        match self {
            Axis::Sagittal => (1, 2),
            Axis::Coronal => (0, 2),
            Axis::Axial => (0, 1),
        }
    }
}

impl FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "sagittal" | "s" => Ok(Axis::Sagittal),
            "coronal" | "c" => Ok(Axis::Coronal),
            "axial" | "a" => Ok(Axis::Axial),
            other => Err(format!("unknown axis `{other}`; expected sagittal, coronal or axial")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub lo: f64,
    pub hi: f64,
}

impl Default for Window {
    fn default() -> Self {
        Window { lo: 0.0, hi: 1.0 }
    }
}

impl FromStr for Window {
    type Err = String;

    // "lo,hi"
    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let [lo, hi] = parts.as_slice() else {
            return Err(format!("window `{s}` must be `lo,hi`"));
        };
        let lo: f64 = lo.parse().map_err(|_| format!("window bound `{lo}` is not a number"))?;
        let hi: f64 = hi.parse().map_err(|_| format!("window bound `{hi}` is not a number"))?;
        if !(lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(format!("window `{s}` needs finite lo < hi"));
        }
        Ok(Window { lo, hi })
    }
}

/// Window-mapped 8-bit slice, row-major, `width` = first in-plane axis.
/// Rows run from the top of the plane, so the last row index is drawn first.
pub fn extract(image: &VoxelGrid, axis: Axis, index: usize, window: Window) -> (u32, u32, Vec<u8>) {
    let (c, r) = axis.plane();
    let [nx, ny, _] = image.dims;
    let (w, h) = (image.dims[c], image.dims[r]);
    let scale = 255.0 / (window.hi - window.lo);
    let mut out = Vec::with_capacity(w * h);
    for row in (0..h).rev() {
        for col in 0..w {
            let mut p = [0usize; 3];
            p[axis.fixed()] = index;
            p[c] = col;
            p[r] = row;
            let v = image.data[p[0] + nx * (p[1] + ny * p[2])] as f64;
            out.push(((v - window.lo) * scale).round().clamp(0.0, 255.0) as u8);
        }
    }
    (w as u32, h as u32, out)
}

pub fn encode_png(width: u32, height: u32, pixels: &[u8]) -> Vec<u8> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, width, height);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().expect("png header into memory");
        writer.write_image_data(pixels).expect("png data into memory");
    }
    buf
}
