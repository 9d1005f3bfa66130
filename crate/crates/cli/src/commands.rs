use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::Context;
use causal_voxel::bundle::ModelBundle;
use causal_voxel::dataset_io::{
    read_evidence_csv, read_manifest, read_volume, read_volume_on, record_latent, sample_dataset, scatter_csv,
    write_atomic, write_evidence_csv, write_volume, DatasetManifest,
};
use causal_voxel::inversion::{invert, OptimizerConfig};
use causal_voxel::latent_edit::{
    counterfactual_from_inversion, fit_regression, regression_pairs, EditMode, VolumeRegression,
};
use causal_voxel::mechanisms::{
    eval_loglik_table, train_mechanisms, EpochLoss, MechanismKind, MechanismSet, ModelFile, TrainConfig,
    TrainingMetadata,
};
use causal_voxel::metrics::{
    bmmd2, distribution_metrics, ssim3d, volume_change_eval, Bandwidth, EvalSample, FeatureExtractor, MetricsReport,
    VolumeChangeConfig, FEATURE_DIM, FEATURE_SEED,
};
use causal_voxel::phantom::{measure_volumes, MappingNetwork, PhantomGenerator, VoxelGrid, VOLUME_NAMES};
use causal_voxel::reference::reference_mechanisms;
use causal_voxel::scm::{sample_prior, CausalGraph, Evidence, Intervention};
use causal_voxel::stats::{pearson, spearman};
use causal_voxel_service::{AppState, ServiceConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{echo_path, require, resolve, usage, write_echo};
use crate::{Cli, Command, OptimizerArgs};

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let file = cli.config.as_deref();
    let seed = cli.seed;
    match cli.command {
        Command::Simulate(a) => simulate(resolve(
            file,
            json!({ "scm": a.scm, "n": a.n, "out": a.out, "seed": seed }),
        )?),
        Command::TrainScm(a) => train_scm(resolve(
            file,
            json!({
                "graph": a.graph, "data": a.data, "out": a.out, "history": a.history,
                "kind": a.kind, "seed": seed,
                "train": {
                    "epochs": a.epochs, "learning_rate": a.learning_rate, "batch_size": a.batch_size,
                    "patience": a.patience, "validation_fraction": a.validation_fraction, "hidden": a.hidden,
                },
            }),
        )?),
        Command::EvalLoglik(a) => eval_loglik(resolve(
            file,
            json!({
                "data": a.data,
                "models": (!a.models.is_empty()).then_some(a.models),
                "with_reference": a.with_reference.then_some(true),
                "out": a.out,
            }),
        )?),
        Command::SampleDataset(a) => sample(resolve(
            file,
            json!({ "scm": a.scm, "n": a.n, "out": a.out, "seed": seed }),
        )?),
        Command::FitRegression(a) => fit_reg(resolve(file, json!({ "n": a.n, "out": a.out, "seed": seed }))?),
        Command::Invert(a) => invert_cmd(resolve(
            file,
            json!({
                "image": a.image, "out": a.out, "recon": a.recon, "noise": a.noise, "seed": seed,
                "optimizer": optimizer_flags(&a.optimizer),
            }),
        )?),
        Command::Counterfactual(a) => counterfactual_cmd(resolve(
            file,
            json!({
                "image": a.image,
                "set": assignments(&a.set, "--set")?,
                "demographics": assignments(&a.demographics, "--demographic")?,
                "scm": a.scm, "reg": a.reg, "out": a.out, "audit": a.audit, "mode": a.mode, "seed": seed,
                "optimizer": optimizer_flags(&a.optimizer),
            }),
        )?),
        Command::EvalVolumes(a) => eval_volumes(resolve(
            file,
            json!({
                "manifest": a.manifest, "settings": a.settings, "n": a.n, "reg": a.reg,
                "latents": a.latents, "mode": a.mode, "out": a.out, "seed": seed,
                "optimizer": optimizer_flags(&a.optimizer),
            }),
        )?),
        Command::Metrics(a) => metrics_cmd(resolve(
            file,
            json!({
                "manifest": a.manifest, "reference": a.reference, "n": a.n,
                "scatter": a.scatter, "out": a.out, "seed": seed,
            }),
        )?),
        Command::Serve(a) => serve(resolve(
            file,
            json!({
                "scm": a.scm, "reg": a.reg, "addr": a.addr, "cache": a.cache, "echo": a.echo, "seed": seed,
                "optimizer": optimizer_flags(&a.optimizer),
            }),
        )?),
    }
}

fn optimizer_flags(o: &OptimizerArgs) -> Value {
    json!({
        "max_iterations": o.max_iterations,
        "multi_start": o.multi_start,
        "polish_iterations": o.polish_iterations,
        "cg_iterations": o.cg_iterations,
        "lambda": o.lambda,
    })
}

fn assignments(items: &[String], flag: &str) -> anyhow::Result<Option<BTreeMap<String, f64>>> {
    let mut out = BTreeMap::new();
    for item in items {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| usage(format!("{flag} expects NAME=VALUE, got `{item}`")))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| usage(format!("{flag} {k}: `{v}` is not a number")))?;
        if out.insert(k.trim().to_string(), v).is_some() {
            return Err(usage(format!("{flag} sets `{k}` twice")));
        }
    }
    Ok((!out.is_empty()).then_some(out))
}

fn with_seed(mut o: OptimizerConfig, seed: u64) -> anyhow::Result<OptimizerConfig> {
    o.seed = seed;
    o.validate().map_err(|e| usage(e.to_string()))?;
    Ok(o)
}

fn load_scm(path: Option<&Path>) -> anyhow::Result<(CausalGraph, MechanismSet)> {
    match path {
        Some(p) => {
            let m = ModelFile::load(p).with_context(|| format!("loading {}", p.display()))?;
            Ok((m.graph, m.mechanisms))
        }
        None => Ok((CausalGraph::alzheimers(), reference_mechanisms())),
    }
}

fn load_regression(
    path: Option<&Path>,
    samples: usize,
    seed: u64,
    gen: &PhantomGenerator,
) -> anyhow::Result<VolumeRegression> {
    let reg = match path {
        Some(p) => VolumeRegression::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => {
            let (w, v) = regression_pairs(gen, &MappingNetwork::default(), samples, seed)?;
            fit_regression(&w, &v)?
        }
    };
    if reg.dim != gen.style_dim() {
        anyhow::bail!("regression is over {} style dims, generator has {}", reg.dim, gen.style_dim());
    }
    Ok(reg)
}

fn volume_map(v: [f64; 3]) -> BTreeMap<&'static str, f64> {
    VOLUME_NAMES.iter().copied().zip(v).collect()
}

// ---- simulate ----

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct SimulateConfig {
    scm: Option<PathBuf>,
    n: usize,
    out: Option<PathBuf>,
    seed: u64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            scm: None,
            n: 1000,
            out: None,
            seed: 0,
        }
    }
}

fn simulate(cfg: SimulateConfig) -> anyhow::Result<()> {
    let out = require(&cfg.out, "--out")?;
    let (graph, mech) = load_scm(cfg.scm.as_deref())?;
    let sample = sample_prior(&graph, &mech, cfg.seed, cfg.n)?;
    let order = graph.validate_and_order()?;
    let columns: Vec<&str> = order.iter().map(String::as_str).collect();
    write_evidence_csv(&out, &sample.rows, &columns)?;
    write_echo(&echo_path(&out, false), "simulate", &cfg)?;
    let clamped: usize = sample.clamp_counts.values().sum();
    println!("wrote {} rows to {} ({clamped} clamped values)", sample.rows.len(), out.display());
    Ok(())
}

// ---- train-scm ----

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "lowercase")]
enum KindName {
    Affine,
    Flow,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct TrainScmConfig {
    graph: Option<PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    history: Option<PathBuf>,
    kind: KindName,
    train: TrainConfig,
    seed: u64,
}

impl Default for TrainScmConfig {
    fn default() -> Self {
        TrainScmConfig {
            graph: None,
            data: None,
            out: None,
            history: None,
            kind: KindName::Affine,
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

fn history_csv(history: &BTreeMap<String, Vec<EpochLoss>>) -> String {
    let mut s = String::from("target,epoch,train_nll,validation_nll\n");
    for (target, rows) in history {
        for r in rows {
            s.push_str(&format!("{target},{},{},{}\n", r.epoch, r.train_nll, r.validation_nll));
        }
    }
    s
}

fn train_scm(mut cfg: TrainScmConfig) -> anyhow::Result<()> {
    let data = require(&cfg.data, "--data")?;
    let out = require(&cfg.out, "--out")?;
    cfg.train.seed = cfg.seed;
    let graph = match &cfg.graph {
        Some(p) => CausalGraph::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => CausalGraph::alzheimers(),
    };
    let rows = read_evidence_csv(&data)?;
    let kind = match cfg.kind {
        KindName::Affine => MechanismKind::ConditionalAffine,
        KindName::Flow => MechanismKind::flow(),
    };
    let trained = train_mechanisms(&rows, &graph, kind, &cfg.train)?;
    let selected = trained
        .history
        .iter()
        .filter_map(|(k, h)| {
            h.iter()
                .min_by(|a, b| a.validation_nll.total_cmp(&b.validation_nll))
                .map(|e| (k.clone(), *e))
        })
        .collect();
    let meta = TrainingMetadata {
        kind,
        config: cfg.train.clone(),
        rows: rows.len(),
        selected,
    };
    let model = ModelFile::new(graph, trained.mechanisms, cfg.seed, Some(meta));
    model.save(&out)?;
    let history = cfg.history.clone().unwrap_or_else(|| {
        let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".history.csv");
        out.with_file_name(name)
    });
    write_atomic(&history, history_csv(&trained.history).as_bytes())?;
    write_echo(&echo_path(&out, false), "train-scm", &cfg)?;
    for (k, e) in model.training.iter().flat_map(|t| &t.selected) {
        println!("{k:<10} epoch {:>4}  validation nll {:.4}", e.epoch, e.validation_nll);
    }
    println!("wrote {} and {}", out.display(), history.display());
    Ok(())
}

// ---- eval-loglik ----

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct EvalLoglikConfig {
    data: Option<PathBuf>,
    models: Vec<String>,
    with_reference: bool,
    out: Option<PathBuf>,
}

fn eval_loglik(cfg: EvalLoglikConfig) -> anyhow::Result<()> {
    let data = require(&cfg.data, "--data")?;
    let out = require(&cfg.out, "--out")?;
    let rows = read_evidence_csv(&data)?;
    let mut sets: Vec<(String, MechanismSet)> = Vec::new();
    if cfg.with_reference {
        sets.push(("reference".into(), reference_mechanisms()));
    }
    for m in &cfg.models {
        let (name, path) = m
            .split_once('=')
            .ok_or_else(|| usage(format!("--model expects NAME=PATH, got `{m}`")))?;
        let file = ModelFile::load(Path::new(path)).with_context(|| format!("loading {path}"))?;
        sets.push((name.to_string(), file.mechanisms));
    }
    if sets.is_empty() {
        return Err(usage("give at least one --model or --with-reference"));
    }
    let refs: Vec<(&str, &MechanismSet)> = sets.iter().map(|(n, s)| (n.as_str(), s)).collect();
    let table = eval_loglik_table(&refs, &rows)?;
    write_atomic(&out, table.to_csv().as_bytes())?;
    write_echo(&echo_path(&out, false), "eval-loglik", &cfg)?;
    print!("{}", table.to_pretty());
    Ok(())
}

// ---- sample-dataset ----

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct SampleConfig {
    scm: Option<PathBuf>,
    n: usize,
    out: Option<PathBuf>,
    seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            scm: None,
            n: 100,
            out: None,
            seed: 0,
        }
    }
}

fn sample(cfg: SampleConfig) -> anyhow::Result<()> {
    let out = require(&cfg.out, "--out")?;
    let (graph, mech) = load_scm(cfg.scm.as_deref())?;
    let gen = PhantomGenerator::default();
    let manifest = sample_dataset(&graph, &mech, &gen, cfg.n, cfg.seed, &out)?;
    write_echo(&echo_path(&out, true), "sample-dataset", &cfg)?;
    let flagged = manifest.records.iter().filter(|r| r.flagged).count();
    println!("wrote {} subjects to {} ({flagged} flagged)", manifest.records.len(), out.display());
    Ok(())
}

// ---- fit-regression ----

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct FitRegressionConfig {
    n: usize,
    out: Option<PathBuf>,
    seed: u64,
}

impl Default for FitRegressionConfig {
    fn default() -> Self {
        FitRegressionConfig {
            n: 200,
            out: None,
            seed: 0,
        }
    }
}

fn fit_reg(cfg: FitRegressionConfig) -> anyhow::Result<()> {
    let out = require(&cfg.out, "--out")?;
    let reg = load_regression(None, cfg.n, cfg.seed, &PhantomGenerator::default())?;
    reg.save(&out)?;
    write_echo(&echo_path(&out, false), "fit-regression", &cfg)?;
    for (k, f) in &reg.fits {
        println!("{k:<10} R^2 {:.4}", f.r_squared);
    }
    Ok(())
}

// ---- invert ----

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct InvertConfig {
    image: Option<PathBuf>,
    out: Option<PathBuf>,
    recon: Option<PathBuf>,
    noise: Option<PathBuf>,
    optimizer: OptimizerConfig,
    seed: u64,
}

fn invert_cmd(cfg: InvertConfig) -> anyhow::Result<()> {
    let image_path = require(&cfg.image, "--image")?;
    let out = require(&cfg.out, "--out")?;
    let opt = with_seed(cfg.optimizer.clone(), cfg.seed)?;
    let gen = PhantomGenerator::default();
    let image = read_volume_on(&image_path, &gen.grid)?;
    let inv = invert(&image, &gen, &opt)?;
    let latent = json!({
        "w_hat": inv.w_hat,
        "l1_error": inv.l1_error,
        "style_l1": inv.style_l1,
        "iterations": inv.iterations,
        "converged": inv.converged,
        "degenerate": inv.degenerate,
        "noise_solver": {
            "iterations": inv.noise_report.iterations,
            "converged": inv.noise_report.converged,
            "final_residual": inv.noise_report.residual_norms.last(),
        },
    });
    write_atomic(&out, (serde_json::to_string_pretty(&latent)? + "\n").as_bytes())?;
    if let Some(p) = &cfg.recon {
        write_volume(p, &gen.generate(&inv.w_hat, &inv.n_hat)?)?;
    }
    if let Some(p) = &cfg.noise {
        let n = VoxelGrid::from_f64(gen.grid, &inv.n_hat.values);
        write_volume(p, &n)?;
    }
    write_echo(&echo_path(&out, false), "invert", &cfg)?;
    println!(
        "L1 {:.3e}  style-only L1 {:.3e}  {} iterations{}",
        inv.l1_error,
        inv.style_l1,
        inv.iterations,
        if inv.converged { "" } else { " (not converged)" }
    );
    Ok(())
}

// ---- counterfactual ----

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct CounterfactualConfig {
    image: Option<PathBuf>,
    set: BTreeMap<String, f64>,
    demographics: BTreeMap<String, f64>,
    scm: Option<PathBuf>,
    reg: Option<PathBuf>,
    regression_samples: usize,
    out: Option<PathBuf>,
    audit: Option<PathBuf>,
    mode: EditMode,
    optimizer: OptimizerConfig,
    seed: u64,
}

impl Default for CounterfactualConfig {
    fn default() -> Self {
        CounterfactualConfig {
            image: None,
            set: BTreeMap::new(),
            demographics: BTreeMap::new(),
            scm: None,
            reg: None,
            regression_samples: 200,
            out: None,
            audit: None,
            mode: EditMode::default(),
            optimizer: OptimizerConfig::default(),
            seed: 0,
        }
    }
}

fn counterfactual_cmd(cfg: CounterfactualConfig) -> anyhow::Result<()> {
    let image_path = require(&cfg.image, "--image")?;
    let out = require(&cfg.out, "--out")?;
    let opt = with_seed(cfg.optimizer.clone(), cfg.seed)?;
    let gen = PhantomGenerator::default();
    let (graph, mech) = load_scm(cfg.scm.as_deref())?;
    let intervention = Intervention {
        assignments: cfg.set.clone(),
    };
    for (k, &v) in &cfg.set {
        graph.variable(k).and_then(|s| s.check_value(v)).map_err(|e| usage(e.to_string()))?;
    }
    let demographics = (!cfg.demographics.is_empty()).then(|| Evidence {
        values: cfg.demographics.clone(),
    });
    let regression = load_regression(cfg.reg.as_deref(), cfg.regression_samples, cfg.seed, &gen)?;
    let image = read_volume_on(&image_path, &gen.grid)?;
    let inversion = invert(&image, &gen, &opt)?;
    let outcome = counterfactual_from_inversion(
        &image,
        inversion,
        demographics.as_ref(),
        &intervention,
        &graph,
        &mech,
        &gen,
        &regression,
        cfg.mode,
    )?;
    write_volume(&out, &outcome.image)?;
    let before = measure_volumes(&image);
    let after = measure_volumes(&outcome.image);
    let ssim = ssim3d(&image, &outcome.image)?;
    let inv = &outcome.inversion;
    let audit = json!({
        "image": image_path,
        "interventions": cfg.set,
        "mode": cfg.mode,
        "factual": outcome.factual.values,
        "counterfactual": outcome.counterfactual.values,
        "defaulted": outcome.defaulted,
        "clamped": outcome.clamped,
        "measured_factual": volume_map(before),
        "measured_counterfactual": volume_map(after),
        "ssim": ssim,
        "w_hat": inv.w_hat,
        "w_edited": outcome.w_edited,
        "inversion": {
            "l1_error": inv.l1_error,
            "style_l1": inv.style_l1,
            "iterations": inv.iterations,
            "converged": inv.converged,
            "degenerate": inv.degenerate,
            "noise_iterations": inv.noise_report.iterations,
        },
        "regression_sha256": regression.provenance_sha256,
    });
    let audit_path = cfg.audit.clone().unwrap_or_else(|| {
        let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".audit.json");
        out.with_file_name(name)
    });
    write_atomic(&audit_path, (serde_json::to_string_pretty(&audit)? + "\n").as_bytes())?;
    write_echo(&echo_path(&out, false), "counterfactual", &cfg)?;
    println!("{:<10} {:>10} {:>10} {:>8}", "volume", "factual", "cf", "delta%");
    for (k, name) in VOLUME_NAMES.iter().enumerate() {
        println!(
            "{name:<10} {:>10.1} {:>10.1} {:>+8.2}",
            before[k],
            after[k],
            100.0 * (after[k] - before[k]) / before[k]
        );
    }
    println!("SSIM {ssim:.4}");
    Ok(())
}

// ---- eval-volumes ----

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "lowercase")]
enum Latents {
    Known,
    Invert,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct EvalVolumesConfig {
    manifest: Option<PathBuf>,
    /// Percent.
    settings: Vec<f64>,
    n: usize,
    reg: Option<PathBuf>,
    regression_samples: usize,
    latents: Latents,
    mode: EditMode,
    out: Option<PathBuf>,
    optimizer: OptimizerConfig,
    seed: u64,
}

impl Default for EvalVolumesConfig {
    fn default() -> Self {
        EvalVolumesConfig {
            manifest: None,
            settings: vec![-15.0, -10.0, -5.0, 5.0, 10.0, 15.0],
            n: 50,
            reg: None,
            regression_samples: 200,
            latents: Latents::Known,
            mode: EditMode::default(),
            out: None,
            optimizer: OptimizerConfig::default(),
            seed: 0,
        }
    }
}

fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_images(manifest: &DatasetManifest, base: &Path, n: usize) -> anyhow::Result<Vec<VoxelGrid>> {
    manifest
        .records
        .par_iter()
        .take(n)
        .map(|r| {
            let p = manifest.image_path(base, r);
            read_volume(&p).with_context(|| format!("reading {}", p.display()))
        })
        .collect()
}

fn eval_volumes(cfg: EvalVolumesConfig) -> anyhow::Result<()> {
    let manifest_path = require(&cfg.manifest, "--manifest")?;
    let out = require(&cfg.out, "--out")?;
    if cfg.settings.iter().any(|s| !(-50.0..=50.0).contains(s) || *s == 0.0) {
        return Err(usage("settings are nonzero percentages within ±50"));
    }
    let opt = with_seed(cfg.optimizer.clone(), cfg.seed)?;
    let gen = PhantomGenerator::default();
    let manifest = read_manifest(&manifest_path)?;
    let base = manifest_dir(&manifest_path);
    let records: Vec<_> = manifest.records.iter().filter(|r| !r.flagged).take(cfg.n).cloned().collect();
    if records.len() < cfg.n {
        eprintln!("warning: only {} unflagged subjects available", records.len());
    }
    let samples = records
        .par_iter()
        .map(|r| {
            let p = manifest.image_path(&base, r);
            let image = read_volume_on(&p, &gen.grid).with_context(|| format!("reading {}", p.display()))?;
            let latent = (cfg.latents == Latents::Known).then(|| record_latent(&gen, r));
            Ok(EvalSample { image, latent })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let regression = load_regression(cfg.reg.as_deref(), cfg.regression_samples, cfg.seed, &gen)?;
    let vc = VolumeChangeConfig {
        settings: cfg.settings.iter().map(|s| s / 100.0).collect(),
        mode: cfg.mode,
        optimizer: opt,
    };
    let report = volume_change_eval(&samples, &gen, &regression, &vc)?;
    write_atomic(&out, report.to_csv().as_bytes())?;
    let json_path = out.with_extension("json");
    let metrics = report.to_metrics(serde_json::to_value(&cfg)?);
    write_atomic(&json_path, (metrics.to_json() + "\n").as_bytes())?;
    write_echo(&echo_path(&out, false), "eval-volumes", &cfg)?;
    print!("{}", report.to_pretty());
    Ok(())
}

// ---- metrics ----

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct MetricsConfig {
    manifest: Option<PathBuf>,
    reference: Option<PathBuf>,
    n: Option<usize>,
    scatter: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: u64,
}

fn metrics_cmd(cfg: MetricsConfig) -> anyhow::Result<()> {
    let manifest_path = require(&cfg.manifest, "--manifest")?;
    let out = require(&cfg.out, "--out")?;
    let manifest = read_manifest(&manifest_path)?;
    let n = cfg.n.unwrap_or(manifest.records.len()).min(manifest.records.len());
    let images = load_images(&manifest, &manifest_dir(&manifest_path), n)?;
    let measured: Vec<[f64; 3]> = images.par_iter().map(measure_volumes).collect();
    let records = &manifest.records[..n];

    let mut report = MetricsReport::new(serde_json::to_value(&cfg)?);
    let mmse: Vec<f64> = records.iter().map(|r| r.mmse).collect();
    let ventricle: Vec<f64> = measured.iter().map(|v| v[2]).collect();
    report.push("spearman_mmse_ventricle", vec![spearman(&mmse, &ventricle)]);
    for (k, name) in VOLUME_NAMES.iter().enumerate() {
        let target: Vec<f64> = records.iter().map(|r| r.volumes()[k]).collect();
        let got: Vec<f64> = measured.iter().map(|v| v[k]).collect();
        report.push(&format!("pearson_{name}_measured_vs_target"), vec![pearson(&target, &got)]);
    }
    if let Some(reference) = &cfg.reference {
        let other = read_manifest(reference)?;
        let m = cfg.n.unwrap_or(other.records.len()).min(other.records.len());
        let ref_images = load_images(&other, &manifest_dir(reference), m)?;
        if images.len().min(ref_images.len()) > FEATURE_DIM {
            let extractor = FeatureExtractor::new(images[0].dims, FEATURE_SEED ^ cfg.seed)?;
            let (fd, mmd) = distribution_metrics(&images, &ref_images, &extractor)?;
            report.push("frechet_distance", vec![fd]);
            report.push("feature_mmd2", vec![mmd]);
        } else {
            eprintln!("warning: feature distances need more than {FEATURE_DIM} subjects per cohort; skipped");
        }
        report.push("bmmd2", vec![bmmd2(&images, &ref_images, Bandwidth::Median)?]);
    }
    if let Some(p) = &cfg.scatter {
        let mut sub = manifest.clone();
        sub.records.truncate(n);
        for (r, v) in sub.records.iter_mut().zip(&measured) {
            r.ventricle_ml = v[2];
        }
        write_atomic(p, scatter_csv(&sub)?.as_bytes())?;
    }
    write_atomic(&out, (report.to_json() + "\n").as_bytes())?;
    write_atomic(&out.with_extension("csv"), report.to_csv().as_bytes())?;
    write_echo(&echo_path(&out, false), "metrics", &cfg)?;
    for m in &report.metrics {
        println!("{:<36} {:.4}", m.name, m.mean);
    }
    Ok(())
}

// ---- serve ----

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct ServeConfig {
    scm: Option<PathBuf>,
    reg: Option<PathBuf>,
    regression_samples: usize,
    addr: String,
    cache: usize,
    echo: Option<PathBuf>,
    optimizer: OptimizerConfig,
    seed: u64,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            scm: None,
            reg: None,
            regression_samples: 200,
            addr: "127.0.0.1:8080".into(),
            cache: causal_voxel_service::DEFAULT_CACHE_IMAGES,
            echo: None,
            optimizer: OptimizerConfig::default(),
            seed: 0,
        }
    }
}

fn serve(cfg: ServeConfig) -> anyhow::Result<()> {
    let addr: SocketAddr = cfg
        .addr
        .parse()
        .map_err(|_| usage(format!("--addr `{}` is not host:port", cfg.addr)))?;
    if cfg.cache == 0 {
        return Err(usage("--cache must be positive"));
    }
    let opt = with_seed(cfg.optimizer.clone(), cfg.seed)?;
    let gen = PhantomGenerator::default();
    let model = match &cfg.scm {
        Some(p) => ModelFile::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ModelFile::new(CausalGraph::alzheimers(), reference_mechanisms(), cfg.seed, None),
    };
    let regression = load_regression(cfg.reg.as_deref(), cfg.regression_samples, cfg.seed, &gen)?;
    let bundle = ModelBundle {
        model,
        regression,
        generator: gen,
    };
    match &cfg.echo {
        Some(p) => write_echo(p, "serve", &cfg)?,
        None => eprintln!("{}", serde_json::to_string(&json!({ "command": "serve", "config": &cfg }))?),
    }
    let state = AppState::new(
        Some(bundle),
        ServiceConfig {
            cache_images: cfg.cache,
            optimizer: opt,
        },
    )
    .shared();
    eprintln!("listening on http://{addr}");
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(causal_voxel_service::serve(addr, state))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assignments_parse_and_reject() {
        let m = assignments(&["mmse=30".into(), "brain = -1".into()], "--set").unwrap().unwrap();
        assert_eq!(m["mmse"], 30.0);
        assert_eq!(m["brain"], -1.0);
        assert!(assignments(&["mmse".into()], "--set").is_err());
        assert!(assignments(&["mmse=x".into()], "--set").is_err());
        assert!(assignments(&["a=1".into(), "a=2".into()], "--set").is_err());
        assert_eq!(assignments(&[], "--set").unwrap(), None);
    }

    #[test]
    fn history_layout() {
        let mut h = BTreeMap::new();
        h.insert(
            "gm".to_string(),
            vec![EpochLoss {
                epoch: 0,
                train_nll: 1.5,
                validation_nll: 2.0,
            }],
        );
        assert_eq!(history_csv(&h), "target,epoch,train_nll,validation_nll\ngm,0,1.5,2\n");
    }
}
