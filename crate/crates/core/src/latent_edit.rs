//! Linear volume read-outs in style space and counterfactual image synthesis
//! by moving `w` along them.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inversion::{invert, InversionResult, OptimizerConfig};
use crate::mechanisms::{sha256_hex, MechanismSet};
use crate::phantom::{measure_volumes, MappingNetwork, PhantomGenerator, VoxelGrid, VOLUME_NAMES};
use crate::scm::{counterfactual, CausalGraph, Evidence, Intervention, StructuralMechanism};

pub const REGRESSION_FORMAT_VERSION: u32 = 1;

/// Default demographics for images that carry none.
pub const DEFAULT_AGE: f64 = 72.0;
pub const DEFAULT_SEX: f64 = 0.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeFit {
    pub alpha: Vec<f64>,
    pub intercept: f64,
    pub r_squared: f64,
}

impl VolumeFit {
    pub fn predict(&self, w: &[f64]) -> f64 {
        self.intercept + self.alpha.iter().zip(w).map(|(a, x)| a * x).sum::<f64>()
    }
}

/// Training pairs kept with the fit so its statistics can be re-derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionData {
    pub w: Vec<Vec<f64>>,
    pub volumes: Vec<[f64; 3]>,
}

impl RegressionData {
    fn digest(&self) -> String {
        let mut bytes = Vec::new();
        for (w, v) in self.w.iter().zip(&self.volumes) {
            for x in w.iter().chain(v) {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        sha256_hex(&bytes)
    }
}

/// `y_j = alpha_j^T w + beta_j` for brain, grey matter and ventricles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeRegression {
    pub format_version: u32,
    pub dim: usize,
    pub samples: usize,
    /// SHA-256 of the training pairs (little-endian f64, row by row).
    pub provenance_sha256: String,
    pub fits: BTreeMap<String, VolumeFit>,
    pub data: Option<RegressionData>,
}

fn r_squared(pred: impl Iterator<Item = f64>, y: &[f64]) -> f64 {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = pred.zip(y).map(|(p, v)| (v - p).powi(2)).sum();
    if ss_tot == 0.0 {
        if ss_res == 0.0 { 1.0 } else { 0.0 }
    } else {
        1.0 - ss_res / ss_tot
    }
}

/// Ordinary least squares per volume through a QR factorization of `[w 1]`.
pub fn fit_regression(w: &[Vec<f64>], volumes: &[[f64; 3]]) -> Result<VolumeRegression> {
    let n = w.len();
    let dim = w.first().map_or(0, Vec::len);
    if volumes.len() != n {
        return Err(Error::Dimension {
            expected: format!("{n} volume rows"),
            got: volumes.len().to_string(),
        });
    }
    if let Some(bad) = w.iter().find(|r| r.len() != dim) {
        return Err(Error::Dimension {
            expected: format!("style vectors of length {dim}"),
            got: bad.len().to_string(),
        });
    }
    if dim == 0 || n < dim + 1 {
        return Err(Error::RankDeficient { samples: n, dim });
    }
    let x = DMatrix::from_fn(n, dim + 1, |i, j| if j < dim { w[i][j] } else { 1.0 });
    let qr = x.qr();
    let r = qr.r();
    let q = qr.q();
    let diag_max = (0..=dim).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if (0..=dim).any(|i| r[(i, i)].abs() <= 1e-10 * diag_max.max(f64::MIN_POSITIVE)) {
        return Err(Error::RankDeficient { samples: n, dim });
    }
    let mut fits = BTreeMap::new();
    for (k, name) in VOLUME_NAMES.iter().enumerate() {
        let y = DVector::from_iterator(n, volumes.iter().map(|v| v[k]));
        let qty = q.transpose() * &y;
        let coef = r
            .solve_upper_triangular(&qty)
            .ok_or(Error::RankDeficient { samples: n, dim })?;
        let alpha: Vec<f64> = coef.iter().take(dim).copied().collect();
        if alpha.iter().all(|&a| a == 0.0) {
            return Err(Error::ZeroDirection(name.to_string()));
        }
        let mut fit = VolumeFit {
            alpha,
            intercept: coef[dim],
            r_squared: 0.0,
        };
        let ys: Vec<f64> = y.iter().copied().collect();
        fit.r_squared = r_squared(w.iter().map(|row| fit.predict(row)), &ys);
        fits.insert(name.to_string(), fit);
    }
    let data = RegressionData {
        w: w.to_vec(),
        volumes: volumes.to_vec(),
    };
    Ok(VolumeRegression {
        format_version: REGRESSION_FORMAT_VERSION,
        dim,
        samples: n,
        provenance_sha256: data.digest(),
        fits,
        data: Some(data),
    })
}

impl VolumeRegression {
    pub fn fit(&self, name: &str) -> Result<&VolumeFit> {
        self.fits
            .get(name)
            .ok_or_else(|| Error::InvalidEdit(format!("regression has no volume `{name}`")))
    }

    pub fn predict(&self, w: &[f64]) -> Result<[f64; 3]> {
        if w.len() != self.dim {
            return Err(Error::Dimension {
                expected: format!("style vector of length {}", self.dim),
                got: w.len().to_string(),
            });
        }
        let mut out = [0.0; 3];
        for (o, name) in out.iter_mut().zip(VOLUME_NAMES) {
            *o = self.fit(name)?.predict(w);
        }
        Ok(out)
    }

    /// R^2 per volume recomputed from the retained training pairs.
    pub fn recompute_r_squared(&self) -> Option<BTreeMap<String, f64>> {
        let data = self.data.as_ref()?;
        let mut out = BTreeMap::new();
        for (k, name) in VOLUME_NAMES.iter().enumerate() {
            let fit = self.fits.get(*name)?;
            let ys: Vec<f64> = data.volumes.iter().map(|v| v[k]).collect();
            out.insert(name.to_string(), r_squared(data.w.iter().map(|w| fit.predict(w)), &ys));
        }
        Some(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != REGRESSION_FORMAT_VERSION {
            return Err(Error::FormatVersion(self.format_version));
        }
        for name in VOLUME_NAMES {
            let fit = self.fit(name)?;
            if fit.alpha.len() != self.dim {
                return Err(Error::Dimension {
                    expected: format!("coefficients of length {}", self.dim),
                    got: fit.alpha.len().to_string(),
                });
            }
            if fit.alpha.iter().chain([&fit.intercept]).any(|v| !v.is_finite()) {
                return Err(Error::non_finite(format!("regression for `{name}`")));
            }
            if fit.alpha.iter().all(|&a| a == 0.0) {
                return Err(Error::ZeroDirection(name.to_string()));
            }
        }
        if let Some(data) = &self.data {
            if data.digest() != self.provenance_sha256 {
                return Err(Error::InvalidConfig("regression data does not match its digest".into()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("regression serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let reg: VolumeRegression = serde_json::from_str(text)?;
        reg.validate()?;
        Ok(reg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::dataset_io::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// `(w, measured volumes)` for `n` images `G(f(z), n)` with `z ~ N(0, I)`.
pub fn regression_pairs(
    gen: &PhantomGenerator,
    mapping: &MappingNetwork,
    n: usize,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<[f64; 3]>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ws = Vec::with_capacity(n);
    let mut vols = Vec::with_capacity(n);
    for i in 0..n {
        let z: Vec<f64> = (0..mapping.dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
        let w = mapping.forward(&z)?;
        let img = gen.generate(&w, &gen.noise_from_seed(seed.wrapping_add(i as u64 + 1)))?;
        vols.push(measure_volumes(&img));
        ws.push(w);
    }
    Ok((ws, vols))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    /// Step `dy alpha / |alpha|^2`: the prediction moves by exactly `dy`.
    #[default]
    Exact,
    /// Step `dy alpha / |alpha|`, as the update is usually printed.
    PaperLiteral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditTarget {
    /// New volume in ml.
    Absolute(f64),
    /// Fractional change, in [-0.5, 0.5].
    Relative(f64),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EditRequest {
    pub targets: BTreeMap<String, EditTarget>,
    #[serde(default)]
    pub mode: EditMode,
}

impl EditRequest {
    pub fn new(mode: EditMode) -> Self {
        EditRequest {
            targets: BTreeMap::new(),
            mode,
        }
    }

    pub fn with(mut self, volume: &str, target: EditTarget) -> Self {
        self.targets.insert(volume.to_string(), target);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::InvalidEdit("no target volumes".into()));
        }
        for (name, t) in &self.targets {
            if !VOLUME_NAMES.contains(&name.as_str()) {
                return Err(Error::InvalidEdit(format!(
                    "unknown volume `{name}` (expected one of {})",
                    VOLUME_NAMES.join(", ")
                )));
            }
            match *t {
                EditTarget::Relative(f) if !(-0.5..=0.5).contains(&f) => {
                    return Err(Error::InvalidEdit(format!("fraction {f} for `{name}` outside [-0.5, 0.5]")));
                }
                EditTarget::Absolute(v) if !(v.is_finite() && v > 0.0) => {
                    return Err(Error::InvalidEdit(format!("target {v} ml for `{name}` must be positive")));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Absolute targets given current volumes (brain, gm, ventricle).
    pub fn resolve(&self, current: [f64; 3]) -> Result<BTreeMap<String, f64>> {
        self.validate()?;
        Ok(self
            .targets
            .iter()
            .map(|(name, t)| {
                let k = VOLUME_NAMES.iter().position(|v| v == name).expect("validated");
                let y = match *t {
                    EditTarget::Absolute(v) => v,
                    EditTarget::Relative(f) => current[k] * (1.0 + f),
                };
                (name.clone(), y)
            })
            .collect())
    }
}

/// Moves `w` so the read-outs change by `targets - current`.
///
/// With one target the step follows `mode`; with several it is the
/// minimum-norm `A^T (A A^T)^-1 dy`. Passing the regression prediction at
/// `w` as `current` lands the prediction exactly on the targets.
pub fn edit_latent(
    w: &[f64],
    current: [f64; 3],
    targets: &BTreeMap<String, f64>,
    regression: &VolumeRegression,
    mode: EditMode,
) -> Result<Vec<f64>> {
    if w.len() != regression.dim {
        return Err(Error::Dimension {
            expected: format!("style vector of length {}", regression.dim),
            got: w.len().to_string(),
        });
    }
    if targets.is_empty() {
        return Err(Error::InvalidEdit("no target volumes".into()));
    }
    let mut rows = Vec::new();
    for (name, &y) in targets {
        let k = VOLUME_NAMES
            .iter()
            .position(|v| v == name)
            .ok_or_else(|| Error::InvalidEdit(format!("unknown volume `{name}`")))?;
        let fit = regression.fit(name)?;
        if fit.alpha.iter().all(|&a| a == 0.0) {
            return Err(Error::ZeroDirection(name.clone()));
        }
        rows.push((name.as_str(), &fit.alpha, y - current[k]));
    }
    let mut out = w.to_vec();
    if let [(_, alpha, dy)] = rows.as_slice() {
        let norm2: f64 = alpha.iter().map(|a| a * a).sum();
        let step = match mode {
            EditMode::Exact => dy / norm2,
            EditMode::PaperLiteral => dy / norm2.sqrt(),
        };
        for (o, a) in out.iter_mut().zip(alpha.iter()) {
            *o += step * a;
        }
        return Ok(out);
    }
    let m = rows.len();
    let gram = DMatrix::from_fn(m, m, |i, j| rows[i].1.iter().zip(rows[j].1).map(|(a, b)| a * b).sum::<f64>());
    // name the most collinear pair if the Gram matrix is near singular
    let mut worst = (0, 1, 0.0f64);
    for i in 0..m {
        for j in i + 1..m {
            let c = gram[(i, j)].abs() / (gram[(i, i)] * gram[(j, j)]).sqrt();
            if c > worst.2 {
                worst = (i, j, c);
            }
        }
    }
    let collinear = || Error::Collinear(rows[worst.0].0.to_string(), rows[worst.1].0.to_string());
    if worst.2 > 1.0 - 1e-10 {
        return Err(collinear());
    }
    let dy = DVector::from_iterator(m, rows.iter().map(|r| r.2));
    let coef = gram.cholesky().ok_or_else(collinear)?.solve(&dy);
    for (c, (_, alpha, _)) in coef.iter().zip(&rows) {
        for (o, a) in out.iter_mut().zip(alpha.iter()) {
            *o += c * a;
        }
    }
    Ok(out)
}

/// Everything produced along the way from `I` to `I'`.
#[derive(Debug, Clone)]
pub struct CounterfactualOutcome {
    pub image: VoxelGrid,
    pub factual: Evidence,
    pub counterfactual: Evidence,
    pub inversion: InversionResult,
    pub w_edited: Vec<f64>,
    /// Variables filled with defaults because no demographics were given.
    pub defaulted: Vec<String>,
    /// Variables clamped to their bounds by the forward pass.
    pub clamped: Vec<String>,
}

/// Non-image variables of `graph`, which an image cannot supply.
pub fn demographic_variables(graph: &CausalGraph) -> Vec<String> {
    graph
        .variables
        .iter()
        .map(|v| v.name.clone())
        .filter(|n| !VOLUME_NAMES.contains(&n.as_str()))
        .collect()
}

/// Evidence for an image: measured volumes plus demographics. With no
/// demographics, roots take defaults and the rest their mechanism's median.
pub fn assemble_evidence(
    graph: &CausalGraph,
    mechanisms: &MechanismSet,
    volumes: [f64; 3],
    demographics: Option<&Evidence>,
) -> Result<(Evidence, Vec<String>)> {
    let needed = demographic_variables(graph);
    let mut ev = Evidence::default();
    for (name, v) in VOLUME_NAMES.iter().zip(volumes) {
        if graph.index_of(name).is_some() {
            ev.values.insert(name.to_string(), v);
        }
    }
    let mut defaulted = Vec::new();
    match demographics {
        Some(d) => {
            let missing: Vec<String> = needed.iter().filter(|n| d.get(n).is_none()).cloned().collect();
            if !missing.is_empty() {
                return Err(Error::MissingDemographics(missing));
            }
            for n in &needed {
                ev.values.insert(n.clone(), d.values[n]);
            }
        }
        None => {
            for name in graph.validate_and_order()? {
                if !needed.contains(&name) {
                    continue;
                }
                let v = if graph.is_root(&name) {
                    match name.as_str() {
                        "age" => DEFAULT_AGE,
                        "sex" => DEFAULT_SEX,
                        _ => return Err(Error::MissingDemographics(vec![name])),
                    }
                } else {
                    let mech = mechanisms.get(&name).ok_or_else(|| Error::MissingMechanism(name.clone()))?;
                    let pa = mech
                        .parent_names()
                        .iter()
                        .map(|p| {
                            ev.get(p)
                                .ok_or_else(|| Error::MissingDemographics(vec![p.clone()]))
                        })
                        .collect::<Result<Vec<f64>>>()?;
                    graph.variable(&name)?.clamp(mech.forward(&pa, 0.0)?).0
                };
                ev.values.insert(name.clone(), v);
                defaulted.push(name);
            }
        }
    }
    Ok((ev, defaulted))
}

/// Invert, abduct, intervene, edit `w` to the counterfactual volumes and
/// regenerate with the recovered noise held fixed.
#[allow(clippy::too_many_arguments)]
pub fn counterfactual_image(
    image: &VoxelGrid,
    demographics: Option<&Evidence>,
    intervention: &Intervention,
    graph: &CausalGraph,
    mechanisms: &MechanismSet,
    gen: &PhantomGenerator,
    regression: &VolumeRegression,
    config: &OptimizerConfig,
) -> Result<CounterfactualOutcome> {
    let inversion = invert(image, gen, config)?;
    counterfactual_from_inversion(
        image,
        inversion,
        demographics,
        intervention,
        graph,
        mechanisms,
        gen,
        regression,
        EditMode::Exact,
    )
}

/// Same pipeline as [`counterfactual_image`] with the inversion of `image` already computed.
#[allow(clippy::too_many_arguments)]
pub fn counterfactual_from_inversion(
    image: &VoxelGrid,
    inversion: InversionResult,
    demographics: Option<&Evidence>,
    intervention: &Intervention,
    graph: &CausalGraph,
    mechanisms: &MechanismSet,
    gen: &PhantomGenerator,
    regression: &VolumeRegression,
    mode: EditMode,
) -> Result<CounterfactualOutcome> {
    let measured = measure_volumes(image);
    let (factual, defaulted) = assemble_evidence(graph, mechanisms, measured, demographics)?;
    let pred = counterfactual(graph, mechanisms, &factual, intervention)?;
    let targets: BTreeMap<String, f64> = VOLUME_NAMES
        .iter()
        .filter_map(|n| pred.evidence.get(n).map(|v| (n.to_string(), v)))
        .collect();
    let unchanged = targets.iter().all(|(n, v)| factual.get(n).map(f64::to_bits) == Some(v.to_bits()));
    let w_edited = if unchanged {
        inversion.w_hat.clone()
    } else {
        edit_latent(&inversion.w_hat, measured, &targets, regression, mode)?
    };
    let image_cf = gen.generate(&w_edited, &inversion.n_hat)?;
    Ok(CounterfactualOutcome {
        image: image_cf,
        factual,
        counterfactual: pred.evidence,
        inversion,
        w_edited,
        defaulted,
        clamped: pred.clamped,
    })
}
