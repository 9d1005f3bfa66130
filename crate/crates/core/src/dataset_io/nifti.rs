//! Single-file NIfTI-1 subset: 348-byte header, 4 empty extension bytes,
//! float32 little-endian voxels, x fastest.

use std::path::Path;

use crate::error::{Error, Result};
use crate::phantom::{GridSpec, VoxelGrid};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;
pub const DT_FLOAT32: i16 = 16;
pub const MAGIC: [u8; 4] = *b"n+1\0";
const UNITS_MM: u8 = 2;
// exact f64 spacing rides in `descrip`, since pixdim is only f32
const SPACING_TAG: &str = "spacing_mm=";

fn put_i16(b: &mut [u8], off: usize, v: i16) {
    b[off..off + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(b: &mut [u8], off: usize, v: f32) {
    b[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn get_i16(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn get_f32(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

pub fn encode(image: &VoxelGrid) -> Result<Vec<u8>> {
    let [nx, ny, nz] = image.dims;
    if image.dims.iter().any(|&n| n == 0 || n > i16::MAX as usize) || image.data.len() != nx * ny * nz {
        return Err(Error::Dimension {
            expected: "1..=32767 voxels per axis matching the data length".into(),
            got: format!("{:?} with {} values", image.dims, image.data.len()),
        });
    }
    let mut b = vec![0u8; VOX_OFFSET + 4 * image.data.len()];
    b[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    b[38] = b'r';
    for (i, d) in [3, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1].into_iter().enumerate() {
        put_i16(&mut b, 40 + 2 * i, d);
    }
    put_i16(&mut b, 70, DT_FLOAT32);
    put_i16(&mut b, 72, 32);
    let h = image.spacing_mm as f32;
    for (i, p) in [1.0, h, h, h, 0.0, 0.0, 0.0, 0.0].into_iter().enumerate() {
        put_f32(&mut b, 76 + 4 * i, p);
    }
    put_f32(&mut b, 108, VOX_OFFSET as f32);
    put_f32(&mut b, 112, 1.0);
    put_f32(&mut b, 116, 0.0);
    b[123] = UNITS_MM;
    let descrip = format!("{SPACING_TAG}{}", image.spacing_mm);
    b[148..148 + descrip.len().min(79)].copy_from_slice(&descrip.as_bytes()[..descrip.len().min(79)]);
    // scanner-style affine centred on the grid
    put_i16(&mut b, 254, 1);
    for (row, n) in [nx, ny, nz].into_iter().enumerate() {
        let off = 280 + 16 * row;
        put_f32(&mut b, off + 4 * row, h);
        put_f32(&mut b, off + 12, (-(n as f64 - 1.0) / 2.0 * image.spacing_mm) as f32);
    }
    b[344..348].copy_from_slice(&MAGIC);
    for (chunk, v) in b[VOX_OFFSET..].chunks_exact_mut(4).zip(&image.data) {
        chunk.copy_from_slice(&v.to_le_bytes());
    }
    Ok(b)
}

pub fn decode(b: &[u8]) -> Result<VoxelGrid> {
    if b.len() < HEADER_SIZE {
        return Err(Error::Truncated {
            expected: HEADER_SIZE,
            actual: b.len(),
        });
    }
    let sizeof_hdr = i32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(Error::BadHeader(format!(
            "sizeof_hdr is {sizeof_hdr}, expected 348 (only little-endian files are supported)"
        )));
    }
    let magic: [u8; 4] = b[344..348].try_into().expect("slice of 4");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let datatype = get_i16(b, 70);
    if datatype != DT_FLOAT32 || get_i16(b, 72) != 32 {
        return Err(Error::UnsupportedDatatype(datatype));
    }
    let dim: Vec<i16> = (0..8).map(|i| get_i16(b, 40 + 2 * i)).collect();
    let rank = dim[0];
    if !(3..=7).contains(&rank) || dim[4..=rank as usize].iter().any(|&d| d != 1) {
        return Err(Error::BadHeader(format!("only single 3-D volumes are supported, dim = {dim:?}")));
    }
    if dim[1..4].iter().any(|&d| d < 1) {
        return Err(Error::BadHeader(format!("non-positive extent in dim = {dim:?}")));
    }
    let dims = [dim[1] as usize, dim[2] as usize, dim[3] as usize];
    let vox_offset = get_f32(b, 108);
    if !(vox_offset >= VOX_OFFSET as f32) || vox_offset.fract() != 0.0 {
        return Err(Error::BadHeader(format!("vox_offset {vox_offset} is invalid")));
    }
    let start = vox_offset as usize;
    let count: usize = dims.iter().product();
    let expected = start + 4 * count;
    if b.len() < expected {
        return Err(Error::Truncated {
            expected,
            actual: b.len(),
        });
    }
    let pix = [get_f32(b, 80), get_f32(b, 84), get_f32(b, 88)];
    if pix.iter().any(|&p| !(p > 0.0)) || pix[0] != pix[1] || pix[1] != pix[2] {
        return Err(Error::BadHeader(format!("voxels must be isotropic and positive, pixdim = {pix:?}")));
    }
    let descrip = String::from_utf8_lossy(&b[148..228]);
    let spacing_mm = descrip
        .trim_end_matches('\0')
        .strip_prefix(SPACING_TAG)
        .and_then(|s| s.parse::<f64>().ok())
        .filter(|&s| s as f32 == pix[0])
        .unwrap_or(f64::from(pix[0]));
    let (slope, inter) = (get_f32(b, 112), get_f32(b, 116));
    let scaled = !(slope == 0.0 || (slope == 1.0 && inter == 0.0));
    let data = b[start..expected]
        .chunks_exact(4)
        .map(|c| {
            let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            if scaled { v * slope + inter } else { v }
        })
        .collect();
    Ok(VoxelGrid {
        dims,
        spacing_mm,
        data,
    })
}

pub fn write_volume(path: &Path, image: &VoxelGrid) -> Result<()> {
    super::write_atomic(path, &encode(image)?)
}

pub fn read_volume(path: &Path) -> Result<VoxelGrid> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Reads a volume and checks it sits on `grid`.
pub fn read_volume_on(path: &Path, grid: &GridSpec) -> Result<VoxelGrid> {
    let v = read_volume(path)?;
    if v.dims != grid.dims || v.spacing_mm != grid.spacing_mm {
        return Err(Error::Dimension {
            expected: format!("{:?} at {} mm", grid.dims, grid.spacing_mm),
            got: format!("{:?} at {} mm", v.dims, v.spacing_mm),
        });
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> VoxelGrid {
        let spec = GridSpec {
            dims: [5, 4, 3],
            spacing_mm: 3.2,
        };
        let vals: Vec<f64> = (0..60).map(|i| i as f64 / 59.0).collect();
        VoxelGrid::from_f64(spec, &vals)
    }

    #[test]
    fn header_layout() {
        let b = encode(&sample()).unwrap();
        assert_eq!(&b[0..4], &348i32.to_le_bytes());
        assert_eq!(&b[344..348], b"n+1\0");
        assert_eq!(get_i16(&b, 40), 3);
        assert_eq!((get_i16(&b, 42), get_i16(&b, 44), get_i16(&b, 46)), (5, 4, 3));
        assert_eq!(get_i16(&b, 70), 16);
        assert_eq!(get_i16(&b, 72), 32);
        assert_eq!(get_f32(&b, 80), 3.2f32);
        assert_eq!(get_f32(&b, 108), 352.0);
        assert_eq!((get_f32(&b, 112), get_f32(&b, 116)), (1.0, 0.0));
        assert_eq!(b[123], 2);
        assert_eq!(b.len(), 352 + 4 * 60);
    }

    #[test]
    fn round_trip_is_bitwise() {
        let img = sample();
        let back = decode(&encode(&img).unwrap()).unwrap();
        assert_eq!(back.dims, img.dims);
        assert_eq!(back.spacing_mm.to_bits(), img.spacing_mm.to_bits());
        assert!(back.data.iter().zip(&img.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn distinct_errors() {
        let b = encode(&sample()).unwrap();
        let mut bad = b.clone();
        bad[344] = b'x';
        assert!(matches!(decode(&bad), Err(Error::BadMagic(_))));
        let mut bad = b.clone();
        put_i16(&mut bad, 70, 4);
        assert!(matches!(decode(&bad), Err(Error::UnsupportedDatatype(4))));
        match decode(&b[..b.len() - 7]) {
            Err(Error::Truncated { expected, actual }) => assert_eq!((expected, actual), (592, 585)),
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode(&b[..100]), Err(Error::Truncated { .. })));
    }
}
