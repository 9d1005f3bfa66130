//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use causal_voxel::dataset_io::{
    nifti_bytes, read_volume, realize_subject, record_seed, sample_dataset, DatasetManifest, SubjectRecord,
};
use causal_voxel::inversion::{invert, OptimizerConfig};
use causal_voxel::latent_edit::{counterfactual_image, fit_regression, regression_pairs, VolumeRegression};
use causal_voxel::mechanisms::{
    eval_loglik_table, nll_and_gradient, train_mechanisms, DenseNet, Mechanism, MechanismKind,
    MonotoneFlow, TrainConfig,
};
use causal_voxel::metrics::{
    frechet_distance, mmd2, ssim3d, volume_change_eval, Bandwidth, EvalSample, GaussianStats, VolumeChangeConfig,
};
use causal_voxel::phantom::{measure_volumes, GridSpec, MappingNetwork, NoiseField, PhantomGenerator, VoxelGrid};
use causal_voxel::reference::{linear_recovery_model, reference_cohort, reference_mechanisms};
use causal_voxel::scm::{sample_prior, CausalGraph, Evidence, Intervention};
use causal_voxel::stats::{mean_std, spearman};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn phantoms(gen: &PhantomGenerator, n: usize, seed: u64) -> Vec<(Evidence, Vec<f64>, u64)> {
    let cohort = reference_cohort(n, seed).expect("reference cohort");
    cohort
        .rows
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let v = [row.get("brain").unwrap(), row.get("gm").unwrap(), row.get("ventricle").unwrap()];
            let (w, _) = realize_subject(gen, v, record_seed(seed, i, 1));
            (row, w, record_seed(seed, i, 2))
        })
        .collect()
}

fn regression(gen: &PhantomGenerator) -> VolumeRegression {
    let (w, v) = regression_pairs(gen, &MappingNetwork::default(), 200, 17).expect("pairs");
    fit_regression(&w, &v).expect("fit")
}

fn counterfactual_identity() -> Outcome {
    let gen = PhantomGenerator::default();
    let graph = CausalGraph::alzheimers();
    let mech = reference_mechanisms();
    let reg = regression(&gen);
    let cfg = OptimizerConfig::default();
    let mut worst_evidence: f64 = 0.0;
    let mut ssims = Vec::new();
    for (row, w, noise_seed) in phantoms(&gen, 50, 101) {
        let image = gen.generate(&w, &gen.noise_from_seed(noise_seed)).unwrap();
        let demo = Evidence::default()
            .with("age", row.get("age").unwrap())
            .with("sex", row.get("sex").unwrap())
            .with("mmse", row.get("mmse").unwrap());
        let out = counterfactual_image(&image, Some(&demo), &Intervention::none(), &graph, &mech, &gen, &reg, &cfg)
            .unwrap();
        for (k, v) in &out.factual.values {
            let cf = out.counterfactual.get(k).unwrap();
            worst_evidence = worst_evidence.max((cf - v).abs());
        }
        ssims.push(ssim3d(&image, &out.image).unwrap());
    }
    let min_ssim = ssims.iter().copied().fold(f64::INFINITY, f64::min);
    outcome(
        worst_evidence <= 1e-9 && min_ssim >= 0.98,
        format!("max |evidence change| {worst_evidence:.1e}, min SSIM {min_ssim:.4} over 50 phantoms"),
    )
}

fn mechanism_recovery() -> Outcome {
    let (graph, truth) = linear_recovery_model();
    let train = sample_prior(&graph, &truth, 1, 6000).unwrap().rows;
    let test = sample_prior(&graph, &truth, 2, 2000).unwrap().rows;
    let config = TrainConfig {
        seed: 4,
        ..TrainConfig::default()
    };
    let affine = train_mechanisms(&train, &graph, MechanismKind::ConditionalAffine, &config).unwrap();
    let flow = train_mechanisms(&train, &graph, MechanismKind::flow(), &config).unwrap();
    let Some(Mechanism::ConditionalAffine(m)) = affine.mechanisms.get("v") else {
        return outcome(false, "no affine mechanism for v".into());
    };
    let mut max_err: f64 = 0.0;
    for i in 0..=90 {
        let a = 50.0 + 0.5 * i as f64;
        let (mu, _) = m.location_scale(&[a]).unwrap();
        max_err = max_err.max((mu - (2.0 * a + 3.0)).abs());
    }
    let table = eval_loglik_table(
        &[("true", &truth), ("affine", &affine.mechanisms), ("flow", &flow.mechanisms)],
        &test,
    )
    .unwrap();
    let gap = (table.value("affine", "v").unwrap() - table.value("true", "v").unwrap()).abs();
    println!("{}", table.to_pretty().trim_end());
    outcome(
        max_err <= 0.05 && gap <= 0.05,
        format!("max mean error {max_err:.4}, held-out log-likelihood gap {gap:.4} nats"),
    )
}

fn gradient_correctness() -> Outcome {
    let graph = CausalGraph::alzheimers();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (mi, target) in ["mmse", "brain", "gm", "ventricle"].into_iter().enumerate() {
        let n_in = graph.parents(target).len();
        for (ki, kind) in [MechanismKind::ConditionalAffine, MechanismKind::flow()].into_iter().enumerate() {
            let n_out = match kind {
                MechanismKind::ConditionalAffine => 2,
                MechanismKind::MonotoneFlow { bins, .. } => MonotoneFlow::n_outputs(bins),
            };
            for point in 0..10u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(1000 * mi as u64 + 100 * ki as u64 + point);
                let mut net = DenseNet::with_skip(&[n_in, 16, 16, n_out], 1.0, &mut rng);
                for p in net.params_mut() {
                    *p = 0.6 * *p + 0.05 * rng.random_range(-1.0..1.0);
                }
                let xs: Vec<Vec<f64>> = (0..8).map(|_| (0..n_in).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
                let ys: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
                let (_, g) = nll_and_gradient(&net, kind, &xs, &ys).unwrap();
                let n = net.params().len();
                for _ in 0..12 {
                    let i = rng.random_range(0..n);
                    let h = 1e-5;
                    let mut a = net.clone();
                    a.params_mut()[i] += h;
                    let mut b = net.clone();
                    b.params_mut()[i] -= h;
                    let fd = (nll_and_gradient(&a, kind, &xs, &ys).unwrap().0
                        - nll_and_gradient(&b, kind, &xs, &ys).unwrap().0)
                        / (2.0 * h);
                    let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-3);
                    worst = worst.max(rel);
                    checked += 1;
                }
            }
        }
    }
    outcome(
        worst < 1e-4,
        format!("max relative error {worst:.2e} over {checked} coordinates (4 mechanisms x 2 kinds x 10 points)"),
    )
}

fn volume_change() -> Outcome {
    let gen = PhantomGenerator::default();
    let reg = regression(&gen);
    let samples: Vec<EvalSample> = phantoms(&gen, 50, 202)
        .into_iter()
        .map(|(_, w, s)| {
            let n = gen.noise_from_seed(s);
            EvalSample {
                image: gen.generate(&w, &n).unwrap(),
                latent: Some((w, n)),
            }
        })
        .collect();
    let config = VolumeChangeConfig::default();
    let report = volume_change_eval(&samples, &gen, &reg, &config).unwrap();
    println!("{}", report.to_pretty().trim_end());
    let mut worst_pp: f64 = 0.0;
    let mut ordered = true;
    for v in 0..3 {
        for (s, &setting) in report.settings.iter().enumerate() {
            let (mean, _) = report.summary("change", v, s);
            worst_pp = worst_pp.max(100.0 * (mean - setting).abs());
        }
        // SSIM must fall as |setting| grows, separately for shrinking and growing
        for sign in [-1.0, 1.0] {
            let mut side: Vec<(f64, f64)> = report
                .settings
                .iter()
                .enumerate()
                .filter(|(_, &x)| x * sign > 0.0)
                .map(|(s, &x)| (x.abs(), report.summary("ssim", v, s).0))
                .collect();
            side.sort_by(|a, b| a.0.total_cmp(&b.0));
            ordered &= side.windows(2).all(|p| p[1].1 < p[0].1);
        }
    }
    outcome(
        worst_pp <= 5.0 && ordered,
        format!("worst mean change off by {worst_pp:.2} pp, SSIM strictly decreasing in |setting|: {ordered}"),
    )
}

fn noise_separation() -> Outcome {
    let gen = PhantomGenerator::default();
    let zero = NoiseField::zeros(gen.grid.dims);
    let (mut worst_dev, mut worst_range): (f64, f64) = (0.0, 0.0);
    for (_, w, _) in phantoms(&gen, 3, 303) {
        let clean = measure_volumes(&gen.generate(&w, &zero).unwrap());
        let vols: Vec<[f64; 3]> = (0..100u64)
            .map(|s| measure_volumes(&gen.generate(&w, &gen.noise_from_seed(5000 + s)).unwrap()))
            .collect();
        for k in 0..3 {
            let col: Vec<f64> = vols.iter().map(|v| v[k]).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            worst_dev = worst_dev.max((hi - clean[k]).max(clean[k] - lo) / clean[k]);
            worst_range = worst_range.max((hi - lo) / clean[k]);
        }
    }
    outcome(
        worst_dev < 0.005,
        format!(
            "largest deviation from the noise-free volume over 100 seeds {:.3}% (max - min spread {:.3}%)",
            100.0 * worst_dev,
            100.0 * worst_range
        ),
    )
}

fn inversion() -> Outcome {
    let gen = PhantomGenerator::default();
    let cfg = OptimizerConfig::default();
    let zero = NoiseField::zeros(gen.grid.dims);
    let mut l1 = Vec::new();
    let mut worst_w: f64 = 0.0;
    for (_, w, s) in phantoms(&gen, 20, 404) {
        let noisy = gen.generate(&w, &gen.noise_from_seed(s)).unwrap();
        l1.push(invert(&noisy, &gen, &cfg).unwrap().l1_error);
        let clean = gen.generate(&w, &zero).unwrap();
        let r = invert(&clean, &gen, &cfg).unwrap();
        let err = r.w_hat.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst_w = worst_w.max(err);
    }
    l1.sort_by(f64::total_cmp);
    let median = 0.5 * (l1[9] + l1[10]);
    outcome(
        median < 2e-3 && worst_w < 0.05,
        format!("median final L1 {median:.2e} (20 noisy), max |w_hat - w| {worst_w:.4} (20 noiseless)"),
    )
}

fn metric_identities() -> Outcome {
    let gen = PhantomGenerator::default();
    let img = gen.generate(&[0.1; 8], &gen.noise_from_seed(1)).unwrap();
    let self_ssim = ssim3d(&img, &img).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let batch: Vec<Vec<f64>> = (0..30)
        .map(|_| (0..16).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let mmd = mmd2(&batch, &batch, Bandwidth::Median).unwrap();
    let stats = GaussianStats::from_samples(&batch).unwrap();
    let fd_self = frechet_distance(&stats, &stats).unwrap();
    let mut worst_1d: f64 = 0.0;
    for _ in 0..20 {
        let (m1, m2): (f64, f64) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let (s1, s2): (f64, f64) = (rng.random_range(0.1..3.0), rng.random_range(0.1..3.0));
        let a = GaussianStats::new(vec![m1], vec![s1 * s1]).unwrap();
        let b = GaussianStats::new(vec![m2], vec![s2 * s2]).unwrap();
        let closed = (m1 - m2).powi(2) + (s1 - s2).powi(2);
        worst_1d = worst_1d.max((frechet_distance(&a, &b).unwrap() - closed).abs());
    }
    outcome(
        (self_ssim - 1.0).abs() < 1e-12 && mmd.abs() < 1e-12 && fd_self.abs() < 1e-9 && worst_1d < 1e-6,
        format!(
            "ssim(I, I) = {self_ssim}, MMD2 identical {mmd:.1e}, FD identical {fd_self:.1e}, 1D closed-form error {worst_1d:.1e}"
        ),
    )
}

fn ssim_ordering() -> Outcome {
    let gen = PhantomGenerator::default();
    let subjects = phantoms(&gen, 100, 505);
    let mut wins = 0;
    let (mut same_all, mut other_all) = (Vec::new(), Vec::new());
    for t in 0..100usize {
        let (_, wa, _) = &subjects[t];
        let (_, wb, _) = &subjects[(t * 37 + 11) % 100];
        let base = 9000 + 3 * t as u64;
        let a1 = gen.generate(wa, &gen.noise_from_seed(base)).unwrap();
        let a2 = gen.generate(wa, &gen.noise_from_seed(base + 1)).unwrap();
        let b = gen.generate(wb, &gen.noise_from_seed(base + 2)).unwrap();
        let same = ssim3d(&a1, &a2).unwrap();
        let other = ssim3d(&a1, &b).unwrap();
        wins += usize::from(same > other);
        same_all.push(same);
        other_all.push(other);
    }
    outcome(
        wins >= 95,
        format!(
            "same phantom wins {wins}/100 (mean SSIM {:.3} vs {:.3})",
            mean_std(&same_all).0,
            mean_std(&other_all).0
        ),
    )
}

fn cohort_correlation() -> Outcome {
    let gen = PhantomGenerator::default();
    let dir = tempfile::tempdir().unwrap();
    let m = sample_dataset(&CausalGraph::alzheimers(), &reference_mechanisms(), &gen, 200, 606, dir.path()).unwrap();
    let mmse: Vec<f64> = m.records.iter().map(|r| r.mmse).collect();
    let ventricle: Vec<f64> = m
        .records
        .iter()
        .map(|r| measure_volumes(&read_volume(&m.image_path(dir.path(), r)).unwrap())[2])
        .collect();
    let rho = spearman(&mmse, &ventricle);
    outcome(
        rho < -0.3,
        format!("Spearman(score, measured ventricle) = {rho:.3} over 200 subjects"),
    )
}

fn format_round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut nifti_ok = 0;
    let mut manifest_ok = 0;
    for i in 0..20 {
        let dims = [rng.random_range(1..12), rng.random_range(1..12), rng.random_range(1..12)];
        let spacing = rng.random_range(0.1..5.0);
        let spec = GridSpec { dims, spacing_mm: spacing };
        let mut img = VoxelGrid::zeros(spec);
        for v in &mut img.data {
            *v = f32::from_bits(rng.random::<u32>() & 0xbf7f_ffff);
        }
        let back = nifti_bytes::decode(&nifti_bytes::encode(&img).unwrap()).unwrap();
        let bitwise = back.dims == img.dims
            && back.spacing_mm.to_bits() == img.spacing_mm.to_bits()
            && back.data.iter().zip(&img.data).all(|(a, b)| a.to_bits() == b.to_bits());
        nifti_ok += usize::from(bitwise);

        let mut m = DatasetManifest::new(spec);
        m.provenance.insert("seed".into(), i.to_string());
        m.provenance.insert("note".into(), "comma, \"quote\"".into());
        for j in 0..rng.random_range(0..6) {
            m.records.push(SubjectRecord {
                subject_id: format!("sub-{j:04}"),
                age: rng.random_range(50.0..95.0),
                sex: f64::from(rng.random_range(0..2u8)),
                mmse: rng.random_range(0.0..30.0),
                brain_ml: rng.random_range(900.0..1800.0),
                gm_ml: rng.random_range(300.0..800.0),
                ventricle_ml: rng.random_range(5.0..150.0),
                image_path: format!("images/sub,{j}.nii"),
                style_seed: rng.random(),
                noise_seed: rng.random(),
                flagged: rng.random(),
            });
        }
        let back = DatasetManifest::from_csv(&m.to_csv().unwrap()).unwrap();
        manifest_ok += usize::from(back == m);
    }
    outcome(
        nifti_ok == 20 && manifest_ok == 20,
        format!("NIfTI bitwise {nifti_ok}/20, manifest lossless {manifest_ok}/20"),
    )
}

type Check = (&'static str, fn() -> Outcome, u64);

fn main() {
    let checks: [Check; 10] = [
        ("counterfactual identity", counterfactual_identity, 120),
        ("mechanism recovery", mechanism_recovery, 300),
        ("gradient correctness", gradient_correctness, 0),
        ("volume-change fidelity", volume_change, 600),
        ("noise/volume separation", noise_separation, 0),
        ("inversion", inversion, 0),
        ("metric identities", metric_identities, 0),
        ("SSIM ordering", ssim_ordering, 0),
        ("cohort correlation", cohort_correlation, 0),
        ("format round trips", format_round_trips, 0),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let start = Instant::now();
    let mut failed = 0;
    let mut results = BTreeMap::new();
    for (name, check, budget) in checks {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let out = check();
        let took = t0.elapsed();
        let in_budget = budget == 0 || took <= Duration::from_secs(budget);
        let pass = out.pass && in_budget;
        failed += usize::from(!pass);
        let budget_note = if budget > 0 { format!(", budget {budget} s") } else { String::new() };
        println!(
            "{} {name}: {} [{:.1} s{budget_note}]",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            took.as_secs_f64()
        );
        results.insert(name, pass);
    }
    let total = start.elapsed();
    let suite_ok = total <= Duration::from_secs(20 * 60);
    println!(
        "{} full suite: {} of {} criteria passed [{:.1} s, budget 1200 s]",
        if failed == 0 && suite_ok { "PASS" } else { "FAIL" },
        results.len() - failed,
        results.len(),
        total.as_secs_f64()
    );
    if failed > 0 || !suite_ok {
        std::process::exit(1);
    }
}
