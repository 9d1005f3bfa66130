//! Evaluation battery: SSIM, MMD^2, Frechet distance over fixed features and
//! the counterfactual volume-change protocol.

mod features;
mod frechet;
mod mmd;
mod ssim;

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use features::{FeatureExtractor, FEATURE_DIM, FEATURE_SEED};
pub use frechet::{frechet_distance, GaussianStats};
pub use mmd::{bmmd2, downsample, median_bandwidth, mmd2, Bandwidth, BMMD_DIMS};
pub use ssim::ssim3d;

use crate::error::{Error, Result};
use crate::inversion::{invert, OptimizerConfig};
use crate::latent_edit::{edit_latent, EditMode, VolumeRegression};
use crate::phantom::{measure_volumes, NoiseField, PhantomGenerator, VoxelGrid, VOLUME_NAMES};
use crate::stats::mean_std;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// `0.010(.001)`: mean, then the standard deviation without its leading zero.
pub fn format_mean_std(mean: f64, std: f64, digits: usize) -> String {
    let s = format!("{std:.digits$}");
    let s = s.strip_prefix('0').unwrap_or(&s).to_string();
    format!("{mean:.digits$}({s})")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    /// Per-repeat values the summary was computed from.
    pub values: Vec<f64>,
}

impl MetricSummary {
    pub fn from_values(name: &str, values: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&values);
        MetricSummary {
            name: name.to_string(),
            mean,
            std,
            n: values.len(),
            values,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub metrics: Vec<MetricSummary>,
    pub config: serde_json::Value,
    pub note: Option<String>,
}

impl MetricsReport {
    pub fn new(config: serde_json::Value) -> Self {
        MetricsReport {
            schema_version: REPORT_SCHEMA_VERSION,
            metrics: Vec::new(),
            config,
            note: None,
        }
    }

    pub fn push(&mut self, name: &str, values: Vec<f64>) {
        self.metrics.push(MetricSummary::from_values(name, values));
    }

    pub fn get(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,mean,std,n,formatted\n");
        for m in &self.metrics {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                m.name,
                m.mean,
                m.std,
                m.n,
                format_mean_std(m.mean, m.std, 3)
            );
        }
        out
    }
}

/// An image to edit, with its latents when they are known.
#[derive(Debug, Clone)]
pub struct EvalSample {
    pub image: VoxelGrid,
    pub latent: Option<(Vec<f64>, NoiseField)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VolumeChangeConfig {
    /// Fractional changes requested, in [-0.5, 0.5].
    pub settings: Vec<f64>,
    pub mode: EditMode,
    pub optimizer: OptimizerConfig,
}

impl Default for VolumeChangeConfig {
    fn default() -> Self {
        VolumeChangeConfig {
            settings: vec![-0.15, -0.10, -0.05, 0.05, 0.10, 0.15],
            mode: EditMode::Exact,
            optimizer: OptimizerConfig::default(),
        }
    }
}

/// Measured relative change and SSIM per volume and setting, with every
/// per-sample value kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeChangeReport {
    pub settings: Vec<f64>,
    pub volumes: Vec<String>,
    /// `[volume][setting][sample]`.
    pub change: Vec<Vec<Vec<f64>>>,
    pub ssim: Vec<Vec<Vec<f64>>>,
    /// Fraction of edits whose target moved more than either other volume.
    pub disentanglement: f64,
}

const ROW_LABELS: [&str; 3] = ["Brain", "GM", "Ventricle"];

fn setting_label(s: f64) -> String {
    format!("{:+}%", (s * 100.0).round() as i64)
}

impl VolumeChangeReport {
    pub fn summary(&self, block: &str, volume: usize, setting: usize) -> (f64, f64) {
        let v = if block == "ssim" { &self.ssim } else { &self.change };
        mean_std(&v[volume][setting])
    }

    fn rows(&self) -> Vec<(&'static str, usize, Vec<(f64, f64)>)> {
        let mut rows = Vec::new();
        for (block, key) in [("Actual Change", "change"), ("SSIM", "ssim")] {
            for k in 0..self.volumes.len() {
                let cells = (0..self.settings.len()).map(|s| self.summary(key, k, s)).collect();
                rows.push((block, k, cells));
            }
        }
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("block,volume");
        for s in &self.settings {
            let _ = write!(out, ",{}", setting_label(*s));
        }
        out.push('\n');
        for (block, k, cells) in self.rows() {
            let _ = write!(out, "{block},{}", ROW_LABELS.get(k).copied().unwrap_or(&self.volumes[k]));
            for (m, s) in cells {
                let _ = write!(out, ",{}", format_mean_std(m, s, 3));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_pretty(&self) -> String {
        let mut out = format!("{:<14}{:<10}", "", "Setting");
        for s in &self.settings {
            let _ = write!(out, "{:>14}", setting_label(*s));
        }
        out.push('\n');
        let mut last = "";
        for (block, k, cells) in self.rows() {
            let head = if block == last { "" } else { block };
            last = block;
            let _ = write!(out, "{head:<14}{:<10}", ROW_LABELS.get(k).copied().unwrap_or(&self.volumes[k]));
            for (m, s) in cells {
                let _ = write!(out, "{:>14}", format_mean_std(m, s, 3));
            }
            out.push('\n');
        }
        let _ = writeln!(out, "disentanglement {:.3}", self.disentanglement);
        out
    }

    pub fn to_metrics(&self, config: serde_json::Value) -> MetricsReport {
        let mut r = MetricsReport::new(config);
        for (k, vol) in self.volumes.iter().enumerate() {
            for (s, setting) in self.settings.iter().enumerate() {
                let label = setting_label(*setting);
                r.push(&format!("actual_change/{vol}/{label}"), self.change[k][s].clone());
                r.push(&format!("ssim/{vol}/{label}"), self.ssim[k][s].clone());
            }
        }
        r.metrics.push(MetricSummary {
            name: "disentanglement".into(),
            mean: self.disentanglement,
            std: 0.0,
            n: 1,
            values: vec![self.disentanglement],
        });
        r
    }
}

struct SampleOutcome {
    // [volume][setting]
    change: Vec<Vec<f64>>,
    ssim: Vec<Vec<f64>>,
    local: usize,
}

fn evaluate_sample(
    sample: &EvalSample,
    gen: &PhantomGenerator,
    regression: &VolumeRegression,
    config: &VolumeChangeConfig,
) -> Result<SampleOutcome> {
    let (w, n) = match &sample.latent {
        Some((w, n)) => (w.clone(), n.clone()),
        None => {
            let r = invert(&sample.image, gen, &config.optimizer)?;
            (r.w_hat, r.n_hat)
        }
    };
    let base = measure_volumes(&sample.image);
    let mut out = SampleOutcome {
        change: vec![Vec::new(); VOLUME_NAMES.len()],
        ssim: vec![Vec::new(); VOLUME_NAMES.len()],
        local: 0,
    };
    for (k, name) in VOLUME_NAMES.iter().enumerate() {
        for &s in &config.settings {
            let target = [(name.to_string(), base[k] * (1.0 + s))].into();
            let w2 = edit_latent(&w, base, &target, regression, config.mode)?;
            let img = gen.generate(&w2, &n)?;
            let after = measure_volumes(&img);
            let rel: Vec<f64> = (0..3).map(|j| (after[j] - base[j]) / base[j]).collect();
            if (0..3).filter(|&j| j != k).all(|j| rel[j].abs() < rel[k].abs()) {
                out.local += 1;
            }
            out.change[k].push(rel[k]);
            out.ssim[k].push(ssim3d(&img, &sample.image)?);
        }
    }
    Ok(out)
}

/// Requests each fractional change of each volume on every sample, then
/// measures the achieved change and SSIM against the original.
pub fn volume_change_eval(
    samples: &[EvalSample],
    gen: &PhantomGenerator,
    regression: &VolumeRegression,
    config: &VolumeChangeConfig,
) -> Result<VolumeChangeReport> {
    if samples.is_empty() {
        return Err(Error::BatchTooSmall { need: 1, got: 0 });
    }
    if config.settings.is_empty() || config.settings.iter().any(|s| !(-0.5..=0.5).contains(s)) {
        return Err(Error::InvalidEdit("settings must be fractions in [-0.5, 0.5]".into()));
    }
    let outcomes = samples
        .par_iter()
        .map(|s| evaluate_sample(s, gen, regression, config))
        .collect::<Result<Vec<_>>>()?;
    let nv = VOLUME_NAMES.len();
    let ns = config.settings.len();
    let mut change = vec![vec![Vec::with_capacity(samples.len()); ns]; nv];
    let mut ssim = change.clone();
    let mut local = 0;
    for o in &outcomes {
        for k in 0..nv {
            for s in 0..ns {
                change[k][s].push(o.change[k][s]);
                ssim[k][s].push(o.ssim[k][s]);
            }
        }
        local += o.local;
    }
    Ok(VolumeChangeReport {
        settings: config.settings.clone(),
        volumes: VOLUME_NAMES.iter().map(|s| s.to_string()).collect(),
        change,
        ssim,
        disentanglement: local as f64 / (outcomes.len() * nv * ns) as f64,
    })
}

/// Frechet distance and feature-space MMD^2 between two image sets.
pub fn distribution_metrics(
    a: &[VoxelGrid],
    b: &[VoxelGrid],
    extractor: &FeatureExtractor,
) -> Result<(f64, f64)> {
    let fa = a.par_iter().map(|i| extractor.extract(i)).collect::<Result<Vec<_>>>()?;
    let fb = b.par_iter().map(|i| extractor.extract(i)).collect::<Result<Vec<_>>>()?;
    let fd = frechet_distance(&GaussianStats::from_samples(&fa)?, &GaussianStats::from_samples(&fb)?)?;
    Ok((fd, mmd2(&fa, &fb, Bandwidth::Median)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_formatting() {
        assert_eq!(format_mean_std(0.0104, 0.0011, 3), "0.010(.001)");
        assert_eq!(format_mean_std(-0.13, 0.02, 2), "-0.13(.02)");
    }

    #[test]
    fn report_recomputes_from_values() {
        let mut r = MetricsReport::new(serde_json::json!({"n": 3}));
        r.push("x", vec![1.0, 2.0, 4.0]);
        let m = r.get("x").unwrap();
        let (mean, std) = mean_std(&m.values);
        assert_eq!((m.mean, m.std), (mean, std));
        assert!(r.to_csv().contains("x,"));
        let back: MetricsReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn table_layout() {
        let report = VolumeChangeReport {
            settings: vec![-0.1, 0.1],
            volumes: VOLUME_NAMES.iter().map(|s| s.to_string()).collect(),
            change: vec![vec![vec![-0.1, -0.12], vec![0.1, 0.09]]; 3],
            ssim: vec![vec![vec![0.9, 0.91], vec![0.9, 0.92]]; 3],
            disentanglement: 1.0,
        };
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "block,volume,-10%,+10%");
        assert_eq!(lines.len(), 7);
        assert!(lines[1].starts_with("Actual Change,Brain,-0.110("));
        assert!(lines[6].starts_with("SSIM,Ventricle,"));
        assert!(report.to_pretty().contains("Actual Change"));
    }
}
