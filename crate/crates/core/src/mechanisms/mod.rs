//! Learnable causal mechanisms for the non-image variables.
//!
//! [`ConditionalAffine`] is `v = mu(pa) + sigma(pa) * u` with `(mu, ln sigma)`
//! produced by a [`DenseNet`]; [`MonotoneFlow`] composes the same affine head
//! with a conditional rational-quadratic spline and serves as the flow
//! baseline. Both work on standardized inputs and targets internally and
//! expose everything in native units.

mod dense;
mod loglik;
mod model_file;
pub mod spline;
mod train;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use dense::{DenseNet, Tape};
pub use loglik::{eval_loglik_table, LoglikTable};
pub(crate) use model_file::sha256_hex;
pub use model_file::{ModelFile, TrainingMetadata, MODEL_FORMAT_VERSION};
pub use train::{
    mechanism_seed, nll_and_gradient, train_mechanism, train_mechanisms, EpochLoss, MechanismKind, TrainConfig,
    TrainedMechanisms,
};

use crate::error::{Error, Result};
use crate::scm::{MechanismSource, StructuralMechanism};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Base64 of little-endian f64s.
pub(crate) mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn encode(values: &[f64]) -> String {
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        STANDARD.encode(bytes)
    }

    pub fn decode(text: &str) -> Result<Vec<f64>, String> {
        let bytes = STANDARD.decode(text).map_err(|e| e.to_string())?;
        if bytes.len() % 8 != 0 {
            return Err(format!("{} bytes is not a whole number of f64s", bytes.len()));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        let text = String::deserialize(d)?;
        decode(&text).map_err(serde::de::Error::custom)
    }
}

/// Per-column z-scoring with statistics from the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(n: usize) -> Self {
        Standardizer {
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }

    /// Fits columns of `rows`; columns flagged in `passthrough` are left as is.
    pub fn fit(rows: &[Vec<f64>], passthrough: &[bool]) -> Self {
        let n = passthrough.len();
        let mut s = Self::identity(n);
        if rows.is_empty() {
            return s;
        }
        for j in 0..n {
            if passthrough[j] {
                continue;
            }
            let m = rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64;
            let var = rows.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / rows.len() as f64;
            s.mean[j] = m;
            s.std[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        s
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

// parentless mechanisms feed the net a single constant zero
fn net_input(norm: &Standardizer, net: &DenseNet, pa: &[f64]) -> Vec<f64> {
    let mut x = norm.apply(pa);
    x.resize(net.n_inputs(), 0.0);
    x
}

/// `v = mu(pa) + sigma(pa) * u`, `u ~ N(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalAffine {
    pub target: String,
    pub parents: Vec<String>,
    pub input_norm: Standardizer,
    pub target_mean: f64,
    pub target_std: f64,
    pub net: DenseNet,
}

impl ConditionalAffine {
    fn check_arity(&self, pa: &[f64]) -> Result<()> {
        if pa.len() == self.parents.len() {
            Ok(())
        } else {
            Err(Error::Arity {
                expected: self.parents.len(),
                got: pa.len(),
            })
        }
    }

    /// Conditional mean and scale in native units.
    pub fn location_scale(&self, pa: &[f64]) -> Result<(f64, f64)> {
        self.check_arity(pa)?;
        let out = self.net.forward(&net_input(&self.input_norm, &self.net, pa));
        let mu = self.target_mean + self.target_std * out[0];
        let sigma = self.target_std * out[1].exp();
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::NonPositiveScale(sigma));
        }
        Ok((mu, sigma))
    }

    pub fn log_likelihood(&self, pa: &[f64], v: f64) -> Result<f64> {
        let (mu, sigma) = self.location_scale(pa)?;
        let z = (v - mu) / sigma;
        let ll = -HALF_LN_2PI - sigma.ln() - 0.5 * z * z;
        if ll.is_finite() {
            Ok(ll)
        } else {
            Err(Error::non_finite(format!("log-likelihood of `{}`", self.target)))
        }
    }

    /// Standardized-space NLL and its gradient w.r.t. the two net outputs.
    pub(crate) fn nll_output_grad(out: &[f64], y: f64) -> (f64, [f64; 2]) {
        let (m, ls) = (out[0], out[1]);
        let r = (y - m) * (-ls).exp();
        let nll = HALF_LN_2PI + ls + 0.5 * r * r;
        (nll, [-r * (-ls).exp(), 1.0 - r * r])
    }
}

impl StructuralMechanism for ConditionalAffine {
    fn parent_names(&self) -> &[String] {
        &self.parents
    }

    fn forward(&self, pa: &[f64], u: f64) -> Result<f64> {
        let (mu, sigma) = self.location_scale(pa)?;
        Ok(mu + sigma * u)
    }

    fn abduct(&self, pa: &[f64], v: f64) -> Result<f64> {
        let (mu, sigma) = self.location_scale(pa)?;
        Ok((v - mu) / sigma)
    }
}

/// Flow baseline: `v = mu(pa) + sigma(pa) * spline(u; theta(pa))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneFlow {
    pub target: String,
    pub parents: Vec<String>,
    pub bins: usize,
    pub bound: f64,
    pub input_norm: Standardizer,
    pub target_mean: f64,
    pub target_std: f64,
    pub net: DenseNet,
}

impl MonotoneFlow {
    pub fn n_outputs(bins: usize) -> usize {
        2 + spline::raw_len(bins)
    }

    fn conditioner(&self, pa: &[f64]) -> Result<(f64, f64, spline::Knots)> {
        if pa.len() != self.parents.len() {
            return Err(Error::Arity {
                expected: self.parents.len(),
                got: pa.len(),
            });
        }
        let out = self.net.forward(&net_input(&self.input_norm, &self.net, pa));
        let knots = spline::Knots::from_raw(&out[2..], self.bins, self.bound)?;
        Ok((out[0], out[1], knots))
    }

    /// `v` and `ln |dv/du|`.
    pub fn forward_logdet(&self, pa: &[f64], u: f64) -> Result<(f64, f64)> {
        let (m, ls, knots) = self.conditioner(pa)?;
        let (y, ld) = knots.forward(u);
        let v = self.target_mean + self.target_std * (m + ls.exp() * y);
        Ok((v, ld + ls + self.target_std.ln()))
    }

    /// `u` and `ln |dv/du|` at that `u`.
    pub fn inverse_logdet(&self, pa: &[f64], v: f64) -> Result<(f64, f64)> {
        let (m, ls, knots) = self.conditioner(pa)?;
        let y = ((v - self.target_mean) / self.target_std - m) / ls.exp();
        let (u, ld) = knots.inverse(y);
        Ok((u, ld + ls + self.target_std.ln()))
    }

    pub fn log_likelihood(&self, pa: &[f64], v: f64) -> Result<f64> {
        let (u, logdet) = self.inverse_logdet(pa, v)?;
        let ll = -HALF_LN_2PI - 0.5 * u * u - logdet;
        if ll.is_finite() {
            Ok(ll)
        } else {
            Err(Error::non_finite(format!("log-likelihood of `{}`", self.target)))
        }
    }
}

impl StructuralMechanism for MonotoneFlow {
    fn parent_names(&self) -> &[String] {
        &self.parents
    }

    fn forward(&self, pa: &[f64], u: f64) -> Result<f64> {
        Ok(self.forward_logdet(pa, u)?.0)
    }

    fn abduct(&self, pa: &[f64], v: f64) -> Result<f64> {
        Ok(self.inverse_logdet(pa, v)?.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Mechanism {
    ConditionalAffine(ConditionalAffine),
    MonotoneFlow(MonotoneFlow),
}

impl Mechanism {
    pub fn target(&self) -> &str {
        match self {
            Mechanism::ConditionalAffine(m) => &m.target,
            Mechanism::MonotoneFlow(m) => &m.target,
        }
    }

    pub fn log_likelihood(&self, pa: &[f64], v: f64) -> Result<f64> {
        match self {
            Mechanism::ConditionalAffine(m) => m.log_likelihood(pa, v),
            Mechanism::MonotoneFlow(m) => m.log_likelihood(pa, v),
        }
    }

    pub fn net(&self) -> &DenseNet {
        match self {
            Mechanism::ConditionalAffine(m) => &m.net,
            Mechanism::MonotoneFlow(m) => &m.net,
        }
    }

    fn inner(&self) -> &dyn StructuralMechanism {
        match self {
            Mechanism::ConditionalAffine(m) => m,
            Mechanism::MonotoneFlow(m) => m,
        }
    }
}

impl StructuralMechanism for Mechanism {
    fn parent_names(&self) -> &[String] {
        self.inner().parent_names()
    }
    fn forward(&self, pa: &[f64], u: f64) -> Result<f64> {
        self.inner().forward(pa, u)
    }
    fn abduct(&self, pa: &[f64], v: f64) -> Result<f64> {
        self.inner().abduct(pa, v)
    }
}

/// Mechanisms keyed by target variable.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MechanismSet {
    pub mechanisms: BTreeMap<String, Mechanism>,
}

impl MechanismSet {
    pub fn insert(&mut self, m: Mechanism) {
        self.mechanisms.insert(m.target().to_string(), m);
    }

    pub fn get(&self, name: &str) -> Option<&Mechanism> {
        self.mechanisms.get(name)
    }

    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.mechanisms.keys().map(String::as_str)
    }
}

impl MechanismSource for MechanismSet {
    fn mechanism(&self, name: &str) -> Option<&dyn StructuralMechanism> {
        self.mechanisms.get(name).map(|m| m as &dyn StructuralMechanism)
    }
}

/// Affine mechanism whose net is a single linear layer; `weights` act on
/// raw (unstandardized) parents. Handy for known-truth models and tests.
pub fn linear_gaussian(target: &str, parents: &[&str], weights: &[f64], bias: f64, sigma: f64) -> ConditionalAffine {
    assert_eq!(parents.len(), weights.len());
    let n = parents.len().max(1);
    let mut params = Vec::with_capacity(2 * n + 2);
    // row 0: mean, row 1: log sigma
    params.extend_from_slice(weights);
    params.extend(std::iter::repeat_n(0.0, n - weights.len()));
    params.extend(std::iter::repeat_n(0.0, n));
    params.push(bias);
    params.push(sigma.ln());
    let net = DenseNet::from_params(vec![n, 2], params).expect("sizes match");
    ConditionalAffine {
        target: target.to_string(),
        parents: parents.iter().map(|s| s.to_string()).collect(),
        input_norm: Standardizer::identity(parents.len()),
        target_mean: 0.0,
        target_std: 1.0,
        net,
    }
}
