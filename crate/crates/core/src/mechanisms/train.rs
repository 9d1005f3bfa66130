use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{spline, ConditionalAffine, DenseNet, Mechanism, MechanismSet, MonotoneFlow, Standardizer, Tape};
use crate::error::{Error, Result};
use crate::scm::{CausalGraph, Evidence, VariableKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MechanismKind {
    ConditionalAffine,
    MonotoneFlow { bins: usize, bound: f64 },
}

impl MechanismKind {
    pub fn flow() -> Self {
        MechanismKind::MonotoneFlow { bins: 8, bound: 4.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub patience: usize,
    pub validation_fraction: f64,
    pub hidden: Vec<usize>,
    pub beta1: f64,
    pub beta2: f64,
    /// Learning rate is multiplied by `decay_factor` after this many epochs
    /// without a validation improvement (0 disables decay).
    pub decay_patience: usize,
    pub decay_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            epochs: 500,
            batch_size: 64,
            seed: 0,
            patience: 50,
            validation_fraction: 0.2,
            hidden: vec![32, 32],
            beta1: 0.9,
            beta2: 0.999,
            decay_patience: 10,
            decay_factor: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate < 1.0) {
            return bad("learning rate must lie in (0, 1)");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad("decay factor must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation fraction must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Mean negative log-likelihood (native units) after an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_nll: f64,
    pub validation_nll: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedMechanisms {
    pub mechanisms: MechanismSet,
    /// Per target; entry 0 is the untrained model.
    pub history: BTreeMap<String, Vec<EpochLoss>>,
}

/// Seed for a mechanism's own RNG stream, independent of every other column.
pub fn mechanism_seed(seed: u64, target: &str) -> u64 {
    // FNV-1a over the name, mixed with the run seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in target.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Trains every non-root variable of `graph` independently; the joint
/// likelihood factorizes over mechanisms so this maximizes it as a whole.
pub fn train_mechanisms(
    rows: &[Evidence],
    graph: &CausalGraph,
    kind: MechanismKind,
    config: &TrainConfig,
) -> Result<TrainedMechanisms> {
    let order = graph.validate_and_order()?;
    let mut mechanisms = MechanismSet::default();
    let mut history = BTreeMap::new();
    for target in order.iter().filter(|n| !graph.is_root(n)) {
        let parents: Vec<String> = graph.parents(target).into_iter().map(String::from).collect();
        let binary: Vec<bool> = parents
            .iter()
            .map(|p| graph.variable(p).map(|v| v.kind == VariableKind::Binary))
            .collect::<Result<_>>()?;
        let mut xs = Vec::with_capacity(rows.len());
        let mut ys = Vec::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            let mut x = Vec::with_capacity(parents.len());
            for p in &parents {
                x.push(r.get(p).ok_or_else(|| {
                    Error::IncompleteEvidence(vec![format!("{p} (row {i})")])
                })?);
            }
            xs.push(x);
            ys.push(
                r.get(target)
                    .ok_or_else(|| Error::IncompleteEvidence(vec![format!("{target} (row {i})")]))?,
            );
        }
        let (m, h) = train_mechanism(target, &parents, &binary, &xs, &ys, kind, config)?;
        mechanisms.insert(m);
        history.insert(target.clone(), h);
    }
    Ok(TrainedMechanisms { mechanisms, history })
}

/// Shuffled split shared by all mechanisms (depends only on `n` and seed).
fn split(n: usize, config: &TrainConfig) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let n_val = ((n as f64) * config.validation_fraction).round() as usize;
    let n_val = if n - n_val == 0 { 0 } else { n_val };
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    fn step(&mut self, params: &mut [f64], grad: &[f64], c: &TrainConfig) {
        self.t += 1;
        let b1t = 1.0 - c.beta1.powi(self.t);
        let b2t = 1.0 - c.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * grad[i];
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= self.lr * mh / (vh.sqrt() + 1e-8);
        }
    }
}

/// Loss head shared by both mechanism kinds, on standardized data.
#[derive(Clone, Copy)]
enum Head {
    Affine,
    Flow { bins: usize, bound: f64 },
}

impl Head {
    /// NLL and d NLL / d outputs for one sample.
    fn nll_grad(self, out: &[f64], y: f64, d_out: &mut Vec<f64>) -> Result<f64> {
        d_out.clear();
        match self {
            Head::Affine => {
                let (nll, g) = ConditionalAffine::nll_output_grad(out, y);
                d_out.extend_from_slice(&g);
                Ok(nll)
            }
            Head::Flow { bins, bound } => {
                let (lp, g) = spline::log_density_with_grad(y, out[0], out[1], &out[2..], bins, bound)?;
                d_out.extend(g.iter().map(|x| -x));
                Ok(-lp)
            }
        }
    }
}

/// NLL gradient of a whole dataset with respect to the net parameters, in
/// standardized units. Exposed for gradient verification.
pub fn nll_and_gradient(
    net: &DenseNet,
    kind: MechanismKind,
    xs: &[Vec<f64>],
    ys: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let head = match kind {
        MechanismKind::ConditionalAffine => Head::Affine,
        MechanismKind::MonotoneFlow { bins, bound } => Head::Flow { bins, bound },
    };
    let mut grad = vec![0.0; net.params().len()];
    let mut tape = Tape::default();
    let mut d_out = Vec::new();
    let mut total = 0.0;
    for (x, &y) in xs.iter().zip(ys) {
        let out = net.forward_taped(x, &mut tape).to_vec();
        total += head.nll_grad(&out, y, &mut d_out)?;
        net.backward(&tape, &d_out, &mut grad);
    }
    let n = xs.len().max(1) as f64;
    for g in &mut grad {
        *g /= n;
    }
    Ok((total / n, grad))
}

/// Sets the shortcut and output biases to the least-squares linear-Gaussian
/// fit, so training starts from the best linear model and the hidden layers
/// only have to learn what is left.
fn linear_warm_start(net: &mut DenseNet, zx: &[Vec<f64>], zy: &[f64], idx: &[usize]) {
    let p = net.n_inputs();
    let n = idx.len();
    if n <= p + 1 {
        return;
    }
    let design = nalgebra::DMatrix::from_fn(n, p + 1, |r, c| if c == p { 1.0 } else { zx[idx[r]][c] });
    let y = nalgebra::DVector::from_iterator(n, idx.iter().map(|&i| zy[i]));
    let Ok(beta) = design.clone().svd(true, true).solve(&y, 1e-12) else {
        return;
    };
    let resid = &y - &design * &beta;
    let var = resid.norm_squared() / n as f64;
    if !(var > 0.0) || !beta.iter().all(|b| b.is_finite()) {
        return;
    }
    if let Some(row) = net.skip_row_mut(0) {
        row.copy_from_slice(&beta.as_slice()[..p]);
    }
    *net.output_bias_mut(0) = beta[p];
    *net.output_bias_mut(1) = 0.5 * var.ln();
}

fn mean_nll(net: &DenseNet, head: Head, xs: &[Vec<f64>], ys: &[f64], idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Ok(f64::NAN);
    }
    let mut tape = Tape::default();
    let mut d = Vec::new();
    let mut total = 0.0;
    for &i in idx {
        let out = net.forward_taped(&xs[i], &mut tape);
        let out = out.to_vec();
        total += head.nll_grad(&out, ys[i], &mut d)?;
    }
    Ok(total / idx.len() as f64)
}

/// Trains one mechanism from its parent columns `xs` and target `ys`.
/// Reads nothing beyond its own columns, so other variables cannot affect it.
pub fn train_mechanism(
    target: &str,
    parents: &[String],
    binary_parents: &[bool],
    xs: &[Vec<f64>],
    ys: &[f64],
    kind: MechanismKind,
    config: &TrainConfig,
) -> Result<(Mechanism, Vec<EpochLoss>)> {
    config.validate()?;
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least two aligned rows to train `{target}`"
        )));
    }
    let (train_idx, val_idx) = split(xs.len(), config);
    let train_rows: Vec<Vec<f64>> = train_idx.iter().map(|&i| xs[i].clone()).collect();
    let input_norm = Standardizer::fit(&train_rows, binary_parents);
    let tstats = Standardizer::fit(
        &train_idx.iter().map(|&i| vec![ys[i]]).collect::<Vec<_>>(),
        &[false],
    );
    let (t_mean, t_std) = (tstats.mean[0], tstats.std[0]);
    let zx: Vec<Vec<f64>> = xs.iter().map(|x| input_norm.apply(x)).collect();
    let zy: Vec<f64> = ys.iter().map(|y| (y - t_mean) / t_std).collect();

    let (head, n_out) = match kind {
        MechanismKind::ConditionalAffine => (Head::Affine, 2),
        MechanismKind::MonotoneFlow { bins, bound } => {
            if bins < 2 || !(bound > 0.0) {
                return Err(Error::InvalidSpline(format!("{bins} bins on [-{bound}, {bound}]")));
            }
            (Head::Flow { bins, bound }, MonotoneFlow::n_outputs(bins))
        }
    };
    let mut sizes = vec![parents.len().max(1)];
    sizes.extend(&config.hidden);
    sizes.push(n_out);
    let mut rng = ChaCha8Rng::seed_from_u64(mechanism_seed(config.seed, target));
    // zero output layer: the untrained model is the standardized marginal
    let mut net = DenseNet::with_skip(&sizes, 0.0, &mut rng);
    linear_warm_start(&mut net, &zx, &zy, &train_idx);
    let zx: Vec<Vec<f64>> = if parents.is_empty() {
        zx.into_iter().map(|_| vec![0.0]).collect()
    } else {
        zx
    };

    let ln_std = t_std.ln();
    let eval = |net: &DenseNet| -> Result<(f64, f64)> {
        let tr = mean_nll(net, head, &zx, &zy, &train_idx)? + ln_std;
        let va = mean_nll(net, head, &zx, &zy, &val_idx)? + ln_std;
        Ok((tr, va))
    };
    let (tr0, va0) = eval(&net)?;
    let mut history = vec![EpochLoss {
        epoch: 0,
        train_nll: tr0,
        validation_nll: va0,
    }];
    let select = |l: &EpochLoss| if val_idx.is_empty() { l.train_nll } else { l.validation_nll };
    let mut best = (select(&history[0]), net.clone());
    let mut since_best = 0;

    let mut adam = Adam {
        m: vec![0.0; net.params().len()],
        v: vec![0.0; net.params().len()],
        t: 0,
        lr: config.learning_rate,
    };
    let mut since_decay = 0;
    let mut order = train_idx.clone();
    let mut grad = vec![0.0; net.params().len()];
    let mut tape = Tape::default();
    let mut d_out = Vec::new();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let out = net.forward_taped(&zx[i], &mut tape).to_vec();
                head.nll_grad(&out, zy[i], &mut d_out)?;
                net.backward(&tape, &d_out, &mut grad);
            }
            let inv = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            adam.step(net.params_mut(), &grad, config);
            if !net.all_finite() {
                return Err(Error::TrainingDiverged {
                    target: target.to_string(),
                    epoch,
                    learning_rate: config.learning_rate,
                });
            }
        }
        let (tr, va) = eval(&net)?;
        if !tr.is_finite() || (!val_idx.is_empty() && !va.is_finite()) {
            return Err(Error::TrainingDiverged {
                target: target.to_string(),
                epoch,
                learning_rate: config.learning_rate,
            });
        }
        let loss = EpochLoss {
            epoch,
            train_nll: tr,
            validation_nll: va,
        };
        history.push(loss);
        if select(&loss) < best.0 {
            best = (select(&loss), net.clone());
            since_best = 0;
            since_decay = 0;
        } else {
            since_best += 1;
            since_decay += 1;
            if since_best >= config.patience {
                break;
            }
            if config.decay_patience > 0 && since_decay >= config.decay_patience {
                adam.lr *= config.decay_factor;
                since_decay = 0;
            }
        }
    }

    let net = best.1;
    let parents = parents.to_vec();
    let input_norm = if parents.is_empty() {
        Standardizer::identity(0)
    } else {
        input_norm
    };
    let mech = match kind {
        MechanismKind::ConditionalAffine => Mechanism::ConditionalAffine(ConditionalAffine {
            target: target.to_string(),
            parents,
            input_norm,
            target_mean: t_mean,
            target_std: t_std,
            net,
        }),
        MechanismKind::MonotoneFlow { bins, bound } => Mechanism::MonotoneFlow(MonotoneFlow {
            target: target.to_string(),
            parents,
            bins,
            bound,
            input_norm,
            target_mean: t_mean,
            target_std: t_std,
            net,
        }),
    };
    Ok((mech, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn linear_data(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..n {
            let a: f64 = rng.random_range(50.0..95.0);
            let e: f64 = StandardNormal.sample(&mut rng);
            xs.push(vec![a]);
            ys.push(2.0 * a + 3.0 + 0.5 * e);
        }
        (xs, ys)
    }

    #[test]
    fn recovers_linear_gaussian_mechanism() {
        let (xs, ys) = linear_data(6000, 1);
        let config = TrainConfig {
            seed: 4,
            ..TrainConfig::default()
        };
        let (m, hist) = train_mechanism(
            "v",
            &["a".into()],
            &[false],
            &xs,
            &ys,
            MechanismKind::ConditionalAffine,
            &config,
        )
        .unwrap();
        let Mechanism::ConditionalAffine(m) = m else { unreachable!() };
        let mut max_err: f64 = 0.0;
        for i in 0..=90 {
            let a = 50.0 + 0.5 * i as f64;
            let (mu, sigma) = m.location_scale(&[a]).unwrap();
            max_err = max_err.max((mu - (2.0 * a + 3.0)).abs());
            assert!((sigma - 0.5).abs() < 0.05, "sigma {sigma} at {a}");
        }
        assert!(max_err < 0.05, "max mean error {max_err}");
        let best = hist.iter().map(|h| h.validation_nll).fold(f64::INFINITY, f64::min);
        assert!(best <= hist[0].validation_nll);
    }

    #[test]
    fn training_never_worsens_validation_nll() {
        for seed in 0..5 {
            let (xs, ys) = linear_data(300, 100 + seed);
            let config = TrainConfig {
                seed,
                epochs: 20,
                ..TrainConfig::default()
            };
            for kind in [MechanismKind::ConditionalAffine, MechanismKind::flow()] {
                let (m, hist) = train_mechanism("v", &["a".into()], &[false], &xs, &ys, kind, &config).unwrap();
                let (_, val) = split(xs.len(), &config);
                let trained: f64 = val
                    .iter()
                    .map(|&i| -m.log_likelihood(&xs[i], ys[i]).unwrap())
                    .sum::<f64>()
                    / val.len() as f64;
                assert!(trained <= hist[0].validation_nll + 1e-12);
            }
        }
    }

    #[test]
    fn divergence_is_reported() {
        let (xs, mut ys) = linear_data(50, 2);
        ys[3] = f64::NAN;
        let err = train_mechanism(
            "v",
            &["a".into()],
            &[false],
            &xs,
            &ys,
            MechanismKind::ConditionalAffine,
            &TrainConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::TrainingDiverged { .. } | Error::NonFinite { .. }), "{err}");
    }

    #[test]
    fn config_validation() {
        let c = TrainConfig {
            learning_rate: 1.5,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    fn check_gradient(kind: MechanismKind, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_out = match kind {
            MechanismKind::ConditionalAffine => 2,
            MechanismKind::MonotoneFlow { bins, .. } => MonotoneFlow::n_outputs(bins),
        };
        let mut net = DenseNet::new(&[3, 32, 32, n_out], 1.0, &mut rng);
        for p in net.params_mut() {
            *p *= 0.6;
        }
        let xs: Vec<Vec<f64>> = (0..16)
            .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let ys: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (_, g) = nll_and_gradient(&net, kind, &xs, &ys).unwrap();
        let n = net.params().len();
        for k in 0..40 {
            let i = (k * 7919 + seed as usize * 31) % n;
            let h = 1e-5;
            let mut a = net.clone();
            a.params_mut()[i] += h;
            let mut b = net.clone();
            b.params_mut()[i] -= h;
            let fd = (nll_and_gradient(&a, kind, &xs, &ys).unwrap().0 - nll_and_gradient(&b, kind, &xs, &ys).unwrap().0)
                / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-3);
            assert!(rel < 1e-4, "param {i}: fd {fd} analytic {}", g[i]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            check_gradient(MechanismKind::ConditionalAffine, seed);
            check_gradient(MechanismKind::flow(), seed);
        }
    }
}
