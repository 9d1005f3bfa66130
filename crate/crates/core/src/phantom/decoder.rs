use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{Error, Result};

/// Number of geometric parameters produced by the decoder.
pub const N_PARAMS: usize = 8;
pub const DEFAULT_STYLE_DIM: usize = 8;
pub const DECODER_SEED: u64 = 0x5eed_0d3c;

/// Calibration volumes in ml for the `w = 0` phantom.
pub const CALIBRATION_ML: [f64; 3] = [1354.0, 527.0, 41.0];

const BRAIN_XY: [f64; 2] = [67.0, 82.0];
const VENTRICLE_XY: [f64; 2] = [14.0, 28.0];
// per-parameter decoder gain in mm per unit of w
const SCALES: [f64; N_PARAMS] = [3.0, 3.0, 3.0, 1.0, 2.0, 2.0, 2.0, 3.0];

const MIN_BRAIN_AXIS: f64 = 40.0;
const MIN_THICKNESS: f64 = 2.0;
const MAX_THICKNESS: f64 = 25.0;
const MIN_VENTRICLE_AXIS: f64 = 2.0;
// clearance between the ventricle and the inner ellipsoid; y leaves room for the offset
const VENTRICLE_MARGIN: [f64; 3] = [4.0, 12.0, 4.0];
const MAX_OFFSET: f64 = 8.0;
// softplus sharpness in 1/mm
const SHARPNESS: f64 = 4.0;
const CLAMP_TOL: f64 = 1e-6;

pub const PARAM_NAMES: [&str; N_PARAMS] = [
    "brain_x",
    "brain_y",
    "brain_z",
    "gm_thickness",
    "ventricle_x",
    "ventricle_y",
    "ventricle_z",
    "ventricle_offset_y",
];

pub(crate) fn ellipsoid_mm3(a: f64, b: f64, c: f64) -> f64 {
    4.0 / 3.0 * PI * a * b * c
}

fn third_axis(xy: [f64; 2], ml: f64) -> f64 {
    ml * 1000.0 / (4.0 / 3.0 * PI * xy[0] * xy[1])
}

/// Shell thickness giving `gm_ml` of grey matter inside the given brain.
fn solve_thickness(axes: [f64; 3], gm_ml: f64) -> Option<f64> {
    let brain = ellipsoid_mm3(axes[0], axes[1], axes[2]);
    let target = gm_ml * 1000.0;
    let min_axis = axes.iter().copied().fold(f64::INFINITY, f64::min);
    if !(target > 0.0 && target < brain) {
        return None;
    }
    let shell = |t: f64| brain - ellipsoid_mm3(axes[0] - t, axes[1] - t, axes[2] - t);
    let (mut lo, mut hi) = (0.0, min_axis);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if shell(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Nested-ellipsoid geometry in mm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub brain_axes: [f64; 3],
    pub thickness: f64,
    pub ventricle_axes: [f64; 3],
    pub ventricle_offset: f64,
    /// Names of parameters moved by the smooth validity clamps.
    pub clamped: Vec<String>,
}

impl ShapeParams {
    pub fn from_vector(p: &[f64; N_PARAMS], clamped: Vec<String>) -> Self {
        ShapeParams {
            brain_axes: [p[0], p[1], p[2]],
            thickness: p[3],
            ventricle_axes: [p[4], p[5], p[6]],
            ventricle_offset: p[7],
            clamped,
        }
    }

    pub fn to_vector(&self) -> [f64; N_PARAMS] {
        let (b, v) = (self.brain_axes, self.ventricle_axes);
        [b[0], b[1], b[2], self.thickness, v[0], v[1], v[2], self.ventricle_offset]
    }

    pub fn inner_axes(&self) -> [f64; 3] {
        self.brain_axes.map(|a| a - self.thickness)
    }

    /// (brain, grey matter, ventricle) in ml.
    pub fn analytic_volumes(&self) -> [f64; 3] {
        let [a, b, c] = self.brain_axes;
        let [ia, ib, ic] = self.inner_axes();
        let [va, vb, vc] = self.ventricle_axes;
        let brain = ellipsoid_mm3(a, b, c);
        [
            brain / 1000.0,
            (brain - ellipsoid_mm3(ia, ib, ic)) / 1000.0,
            ellipsoid_mm3(va, vb, vc) / 1000.0,
        ]
    }
}

/// Fixed affine decoder `p = p0 + S w` followed by smooth clamping, where
/// `S = diag(scale) Q` and `Q` has orthonormal rows drawn from the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoder {
    pub style_dim: usize,
    pub seed: u64,
    pub p0: [f64; N_PARAMS],
    pub scale: [f64; N_PARAMS],
    /// Row-major `N_PARAMS x style_dim`, orthonormal rows.
    pub rows: Vec<f64>,
}

impl Default for Decoder {
    fn default() -> Self {
        Self::new(DEFAULT_STYLE_DIM, DECODER_SEED).expect("default dimension is valid")
    }
}

impl Decoder {
    pub fn new(style_dim: usize, seed: u64) -> Result<Self> {
        if style_dim < N_PARAMS {
            return Err(Error::Dimension {
                expected: format!("style dimension >= {N_PARAMS}"),
                got: style_dim.to_string(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::<f64>::from_fn(style_dim, style_dim, |_, _| StandardNormal.sample(&mut rng));
        let qr = g.qr();
        let (q, r) = (qr.q(), qr.r());
        let mut rows = Vec::with_capacity(N_PARAMS * style_dim);
        for i in 0..N_PARAMS {
            // sign fix makes the factorization unique
            let s = r[(i, i)].signum();
            rows.extend((0..style_dim).map(|j| s * q[(j, i)]));
        }
        let brain = [BRAIN_XY[0], BRAIN_XY[1], third_axis(BRAIN_XY, CALIBRATION_ML[0])];
        let thickness = solve_thickness(brain, CALIBRATION_ML[1]).expect("calibration is valid");
        let vz = third_axis(VENTRICLE_XY, CALIBRATION_ML[2]);
        Ok(Decoder {
            style_dim,
            seed,
            p0: [
                brain[0],
                brain[1],
                brain[2],
                thickness,
                VENTRICLE_XY[0],
                VENTRICLE_XY[1],
                vz,
                0.0,
            ],
            scale: SCALES,
            rows,
        })
    }

    fn check(&self, w_len: usize) -> Result<()> {
        if w_len == self.style_dim {
            Ok(())
        } else {
            Err(Error::Dimension {
                expected: format!("style vector of length {}", self.style_dim),
                got: w_len.to_string(),
            })
        }
    }

    /// `S` as a dense matrix.
    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(N_PARAMS, self.style_dim, |i, j| self.scale[i] * self.rows[i * self.style_dim + j])
    }

    /// Unclamped affine part `p0 + S w`.
    pub fn affine<T: Real>(&self, w: &[T]) -> [T; N_PARAMS] {
        std::array::from_fn(|i| {
            let row = &self.rows[i * self.style_dim..(i + 1) * self.style_dim];
            let mut acc = T::cst(0.0);
            for (r, x) in row.iter().zip(w) {
                acc = acc + *x * *r;
            }
            acc * self.scale[i] + self.p0[i]
        })
    }

    /// Decoded parameters and a per-parameter clamp flag.
    pub fn decode_generic<T: Real>(&self, w: &[T]) -> Result<([T; N_PARAMS], [bool; N_PARAMS])> {
        self.check(w.len())?;
        if w.iter().any(|x| !x.value().is_finite()) {
            return Err(Error::non_finite("style vector"));
        }
        let raw = self.affine(w);
        let mut p = raw;
        for a in &mut p[..3] {
            *a = lower(*a, MIN_BRAIN_AXIS);
        }
        let min_axis = p[..3].iter().map(|a| a.value()).fold(f64::INFINITY, f64::min);
        p[3] = upper(lower(p[3], MIN_THICKNESS), T::cst(MAX_THICKNESS.min(min_axis - MIN_THICKNESS)));
        for k in 0..3 {
            let limit = p[k] - p[3] - VENTRICLE_MARGIN[k];
            p[4 + k] = upper(lower(p[4 + k], MIN_VENTRICLE_AXIS), limit);
        }
        p[7] = upper(lower(p[7], -MAX_OFFSET), T::cst(MAX_OFFSET));
        // a parameter counts as clamped when the clamp chain moved it
        let flags = std::array::from_fn(|i| (p[i].value() - raw[i].value()).abs() > CLAMP_TOL);
        Ok((p, flags))
    }

    pub fn decode(&self, w: &[f64]) -> Result<ShapeParams> {
        let (p, flags) = self.decode_generic(w)?;
        let clamped = PARAM_NAMES
            .iter()
            .zip(flags)
            .filter(|(_, f)| *f)
            .map(|(n, _)| n.to_string())
            .collect();
        Ok(ShapeParams::from_vector(&p, clamped))
    }

    /// Style vector whose decoded geometry has exactly these volumes.
    ///
    /// `aspect` jitters the brain axis ratios without changing the brain
    /// volume (log-scale factors for x and y; z compensates) and `offset`
    /// sets the ventricle offset in mm.
    pub fn realize_volumes(&self, volumes_ml: [f64; 3], aspect: [f64; 2], offset: f64) -> Result<Vec<f64>> {
        let [b, g, v] = volumes_ml;
        if !(b > 0.0 && g > 0.0 && v > 0.0 && g < b) {
            return Err(Error::InvalidEdit(format!("unrealizable volumes ({b}, {g}, {v}) ml")));
        }
        let k = (b / CALIBRATION_ML[0]).cbrt();
        let jitter = [aspect[0].exp(), aspect[1].exp(), (-aspect[0] - aspect[1]).exp()];
        let axes: [f64; 3] = std::array::from_fn(|i| self.p0[i] * k * jitter[i]);
        let t = solve_thickness(axes, g)
            .ok_or_else(|| Error::InvalidEdit(format!("grey matter {g} ml does not fit in brain {b} ml")))?;
        let kv = (v / CALIBRATION_ML[2]).cbrt();
        let p = [
            axes[0],
            axes[1],
            axes[2],
            t,
            self.p0[4] * kv,
            self.p0[5] * kv,
            self.p0[6] * kv,
            offset,
        ];
        Ok(self.pseudo_inverse(&p))
    }

    /// Minimum-norm `w` with `p0 + S w = p`.
    pub fn pseudo_inverse(&self, p: &[f64; N_PARAMS]) -> Vec<f64> {
        let mut w = vec![0.0; self.style_dim];
        for i in 0..N_PARAMS {
            let c = (p[i] - self.p0[i]) / self.scale[i];
            for (wj, r) in w.iter_mut().zip(&self.rows[i * self.style_dim..(i + 1) * self.style_dim]) {
                *wj += c * r;
            }
        }
        w
    }
}

fn sharp_softplus<T: Real>(x: T) -> T {
    (x * SHARPNESS).softplus() * (1.0 / SHARPNESS)
}

fn lower<T: Real>(x: T, lo: f64) -> T {
    sharp_softplus(x - lo) + lo
}

fn upper<T: Real>(x: T, hi: T) -> T {
    hi - sharp_softplus(hi - x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Dual;

    #[test]
    fn calibration_phantom_volumes() {
        let d = Decoder::default();
        let p = d.decode(&[0.0; 8]).unwrap();
        assert!(p.clamped.is_empty(), "{:?}", p.clamped);
        let v = p.analytic_volumes();
        for (got, want) in v.iter().zip(CALIBRATION_ML) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
        for (a, b) in p.to_vector().iter().zip(d.p0) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn unit_sphere_volume() {
        assert!((ellipsoid_mm3(1.0, 1.0, 1.0) / 1000.0 - 4.18879e-3).abs() < 1e-8);
    }

    #[test]
    fn rows_are_orthonormal_and_decoder_is_deterministic() {
        let d = Decoder::default();
        let s = DMatrix::from_row_slice(N_PARAMS, 8, &d.rows);
        let gram = &s * s.transpose();
        assert!((gram - DMatrix::identity(8, 8)).abs().max() < 1e-12);
        assert_eq!(d, Decoder::default());
        assert!(Decoder::new(4, 1).is_err());
        assert!(d.decode(&[0.0; 3]).is_err());
    }

    #[test]
    fn small_steps_follow_decoder_columns() {
        let d = Decoder::default();
        let s = d.matrix();
        let base = d.decode(&[0.0; 8]).unwrap().to_vector();
        for k in 0..8 {
            let mut w = [0.0; 8];
            w[k] = 1e-6;
            let p = d.decode(&w).unwrap().to_vector();
            for i in 0..N_PARAMS {
                assert!(((p[i] - base[i]) / 1e-6 - s[(i, k)]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn extreme_styles_are_clamped_to_valid_geometry() {
        let d = Decoder::default();
        for scale in [-60.0, 60.0] {
            for k in 0..8 {
                let mut w = [0.0; 8];
                w[k] = scale;
                let p = d.decode(&w).unwrap();
                let inner = p.inner_axes();
                assert!(p.brain_axes.iter().all(|&a| a > 0.0));
                assert!(p.thickness > 0.0 && p.thickness < p.brain_axes.iter().copied().fold(f64::MAX, f64::min));
                for i in 0..3 {
                    assert!(p.ventricle_axes[i] > 0.0 && p.ventricle_axes[i] < inner[i]);
                }
                assert!(p.ventricle_offset.abs() <= MAX_OFFSET + 1e-9);
                assert!(!p.clamped.is_empty());
            }
        }
    }

    #[test]
    fn realize_volumes_round_trips() {
        let d = Decoder::default();
        for (vols, aspect, off) in [
            ([1354.0, 527.0, 41.0], [0.0, 0.0], 0.0),
            ([1200.0, 480.0, 70.0], [0.03, -0.02], 2.0),
            ([1500.0, 600.0, 25.0], [-0.02, 0.01], -3.0),
        ] {
            let w = d.realize_volumes(vols, aspect, off).unwrap();
            let p = d.decode(&w).unwrap();
            assert!(p.clamped.is_empty());
            for (a, b) in p.analytic_volumes().iter().zip(vols) {
                assert!((a - b).abs() < 1e-6 * b, "{a} vs {b}");
            }
            assert!((p.ventricle_offset - off).abs() < 1e-9);
        }
    }

    #[test]
    fn dual_jacobian_matches_finite_differences() {
        let d = Decoder::default();
        let w0 = [0.3, -0.2, 0.5, 0.1, -0.4, 0.2, 0.0, 0.7];
        let wd: Vec<Dual<8>> = (0..8).map(|i| Dual::seed(w0[i], i)).collect();
        let (p, _) = d.decode_generic(&wd).unwrap();
        for i in 0..N_PARAMS {
            for k in 0..8 {
                let h = 1e-6;
                let mut a = w0;
                a[k] += h;
                let mut b = w0;
                b[k] -= h;
                let fd = (d.decode(&a).unwrap().to_vector()[i] - d.decode(&b).unwrap().to_vector()[i]) / (2.0 * h);
                assert!((fd - p[i].d[k]).abs() < 1e-6, "p{i} w{k}: {fd} vs {}", p[i].d[k]);
            }
        }
    }
}
