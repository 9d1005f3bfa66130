//! Structural causal model over scalar variables and the
//! abduction / action / prediction counterfactual procedure.
//!
//! Root variables carry priors and no mechanism. Their "exogenous noise" is
//! their own value, so an [`ExogenousNoise`] returned by [`abduct`] is
//! sufficient on its own to replay a unit through [`predict`].

mod graph;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use graph::{CausalGraph, Prior, VariableKind, VariableSpec};

use crate::error::{Error, Result};

/// A structural assignment `v = f(pa, u)` that is invertible in `u`.
pub trait StructuralMechanism {
    fn parent_names(&self) -> &[String];
    fn forward(&self, parents: &[f64], u: f64) -> Result<f64>;
    fn abduct(&self, parents: &[f64], v: f64) -> Result<f64>;
}

/// Lookup of the mechanism for each non-root variable.
pub trait MechanismSource {
    fn mechanism(&self, name: &str) -> Option<&dyn StructuralMechanism>;
}

impl<M: StructuralMechanism> MechanismSource for BTreeMap<String, M> {
    fn mechanism(&self, name: &str) -> Option<&dyn StructuralMechanism> {
        self.get(name).map(|m| m as &dyn StructuralMechanism)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub values: BTreeMap<String, f64>,
}

impl Evidence {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.values.insert(name.to_string(), value);
        self
    }

    pub fn validate(&self, graph: &CausalGraph) -> Result<()> {
        for (k, &v) in &self.values {
            graph.variable(k)?.check_value(v)?;
        }
        Ok(())
    }

    fn require_complete(&self, graph: &CausalGraph) -> Result<()> {
        let missing: Vec<String> = graph
            .variables
            .iter()
            .filter(|v| !self.values.contains_key(&v.name))
            .map(|v| v.name.clone())
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::IncompleteEvidence(missing))
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Intervention {
    pub assignments: BTreeMap<String, f64>,
}

impl Intervention {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn set(mut self, name: &str, value: f64) -> Self {
        self.assignments.insert(name.to_string(), value);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExogenousNoise {
    pub values: BTreeMap<String, f64>,
}

/// A graph with some variables pinned by `do(...)`. Pinned variables lose
/// their incoming edges; the underlying graph is borrowed, never modified.
#[derive(Debug, Clone)]
pub struct GraphView<'g> {
    pub graph: &'g CausalGraph,
    pub pinned: BTreeMap<String, f64>,
    order: Vec<String>,
}

impl<'g> GraphView<'g> {
    pub fn parents(&self, name: &str) -> Vec<&'g str> {
        if self.pinned.contains_key(name) {
            Vec::new()
        } else {
            self.graph.parents(name)
        }
    }

    pub fn edges(&self) -> Vec<(&'g str, &'g str)> {
        self.graph
            .edges
            .iter()
            .filter(|(_, c)| !self.pinned.contains_key(c))
            .map(|(p, c)| (p.as_str(), c.as_str()))
            .collect()
    }

    pub fn order(&self) -> &[String] {
        &self.order
    }
}

/// Graph surgery for `do(intervention)`.
pub fn intervene<'g>(graph: &'g CausalGraph, intervention: &Intervention) -> Result<GraphView<'g>> {
    for (k, &v) in &intervention.assignments {
        graph.variable(k)?.check_value(v)?;
    }
    Ok(GraphView {
        graph,
        pinned: intervention.assignments.clone(),
        order: graph.validate_and_order()?,
    })
}

fn parent_values(parents: &[String], values: &BTreeMap<String, f64>) -> Result<Vec<f64>> {
    parents
        .iter()
        .map(|p| {
            values
                .get(p)
                .copied()
                .ok_or_else(|| Error::IncompleteEvidence(vec![p.clone()]))
        })
        .collect()
}

fn mechanism_for<'m>(
    graph: &CausalGraph,
    mechanisms: &'m impl MechanismSource,
    name: &str,
) -> Result<&'m dyn StructuralMechanism> {
    let mech = mechanisms
        .mechanism(name)
        .ok_or_else(|| Error::MissingMechanism(name.to_string()))?;
    let declared: Vec<&str> = graph.parents(name);
    let got: Vec<&str> = mech.parent_names().iter().map(String::as_str).collect();
    if declared.len() != got.len() || declared.iter().any(|p| !got.contains(p)) {
        return Err(Error::VariableMismatch(format!(
            "mechanism for `{name}` consumes {got:?}, graph declares {declared:?}"
        )));
    }
    Ok(mech)
}

/// Step 1: infer the exogenous noise consistent with complete evidence.
pub fn abduct(
    graph: &CausalGraph,
    mechanisms: &impl MechanismSource,
    evidence: &Evidence,
) -> Result<ExogenousNoise> {
    evidence.require_complete(graph)?;
    evidence.validate(graph)?;
    let mut noise = ExogenousNoise::default();
    for name in graph.validate_and_order()? {
        let v = evidence.values[&name];
        let u = if graph.is_root(&name) {
            v
        } else {
            let mech = mechanism_for(graph, mechanisms, &name)?;
            let pa = parent_values(mech.parent_names(), &evidence.values)?;
            mech.abduct(&pa, v)?
        };
        noise.values.insert(name, u);
    }
    Ok(noise)
}

/// Result of a forward pass, with the variables that had to be clamped.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub evidence: Evidence,
    pub clamped: Vec<String>,
}

/// Step 3: forward pass through an intervened view reusing abducted noise.
pub fn predict(
    view: &GraphView<'_>,
    mechanisms: &impl MechanismSource,
    noise: &ExogenousNoise,
) -> Result<Prediction> {
    predict_inner(view, mechanisms, noise, None)
}

fn predict_inner(
    view: &GraphView<'_>,
    mechanisms: &impl MechanismSource,
    noise: &ExogenousNoise,
    factual: Option<&Evidence>,
) -> Result<Prediction> {
    let graph = view.graph;
    let mut values = BTreeMap::new();
    let mut clamped = Vec::new();
    for name in view.order() {
        if let Some(&v) = view.pinned.get(name) {
            values.insert(name.clone(), v);
            continue;
        }
        let u = *noise
            .values
            .get(name)
            .ok_or_else(|| Error::MissingNoise(name.clone()))?;
        if graph.is_root(name) {
            values.insert(name.clone(), u);
            continue;
        }
        let mech = mechanism_for(graph, mechanisms, name)?;
        let pa = parent_values(mech.parent_names(), &values)?;
        // A variable whose parents all kept their factual values reproduces its
        // factual value; reuse it so such variables stay bitwise unchanged.
        if let Some(f) = factual {
            let unchanged = mech
                .parent_names()
                .iter()
                .zip(&pa)
                .all(|(p, &x)| f.get(p).map(f64::to_bits) == Some(x.to_bits()));
            if unchanged {
                values.insert(name.clone(), f.values[name]);
                continue;
            }
        }
        let raw = mech.forward(&pa, u)?;
        let (v, moved) = graph.variable(name)?.clamp(raw);
        if moved {
            clamped.push(name.clone());
        }
        values.insert(name.clone(), v);
    }
    Ok(Prediction {
        evidence: Evidence { values },
        clamped,
    })
}

/// Abduction, action and prediction in one call.
pub fn counterfactual(
    graph: &CausalGraph,
    mechanisms: &impl MechanismSource,
    evidence: &Evidence,
    intervention: &Intervention,
) -> Result<Prediction> {
    let noise = abduct(graph, mechanisms, evidence)?;
    let view = intervene(graph, intervention)?;
    predict_inner(&view, mechanisms, &noise, Some(evidence))
}

/// Ancestral samples with bound clamping.
#[derive(Debug, Clone)]
pub struct PriorSample {
    pub rows: Vec<Evidence>,
    /// Number of clamp events per variable.
    pub clamp_counts: BTreeMap<String, usize>,
}

fn sample_root(spec: &VariableSpec, prior: &Prior, rng: &mut impl Rng) -> f64 {
    match *prior {
        Prior::Bernoulli { p } => f64::from(u8::from(rng.random::<f64>() < p)),
        Prior::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
        Prior::Normal { mean, std } => {
            // rejection keeps the truncated normal exact
            for _ in 0..10_000 {
                let z: f64 = StandardNormal.sample(rng);
                let x = mean + std * z;
                match spec.bounds {
                    Some((lo, hi)) if x < lo || x > hi => continue,
                    _ => return x,
                }
            }
            spec.clamp(mean).0
        }
    }
}

pub fn sample_prior(
    graph: &CausalGraph,
    mechanisms: &impl MechanismSource,
    seed: u64,
    n: usize,
) -> Result<PriorSample> {
    let order = graph.validate_and_order()?;
    for name in &order {
        if graph.is_root(name) {
            if !graph.priors.contains_key(name) {
                return Err(Error::MissingPrior(name.clone()));
            }
        } else {
            mechanism_for(graph, mechanisms, name)?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    let mut clamp_counts: BTreeMap<String, usize> = BTreeMap::new();
    for _ in 0..n {
        let mut values = BTreeMap::new();
        for name in &order {
            let spec = graph.variable(name)?;
            let v = if graph.is_root(name) {
                sample_root(spec, &graph.priors[name], &mut rng)
            } else {
                let mech = mechanisms.mechanism(name).expect("checked above");
                let pa = parent_values(mech.parent_names(), &values)?;
                let u: f64 = StandardNormal.sample(&mut rng);
                let (v, moved) = spec.clamp(mech.forward(&pa, u)?);
                if moved {
                    *clamp_counts.entry(name.clone()).or_default() += 1;
                }
                v
            };
            values.insert(name.clone(), v);
        }
        rows.push(Evidence { values });
    }
    Ok(PriorSample { rows, clamp_counts })
}

/// Variables that are not downstream of any intervened variable.
pub fn unaffected_variables(graph: &CausalGraph, intervention: &Intervention) -> BTreeSet<String> {
    let sources: Vec<&str> = intervention.assignments.keys().map(String::as_str).collect();
    let desc = graph.descendants(&sources);
    graph
        .variables
        .iter()
        .map(|v| v.name.clone())
        .filter(|n| !desc.contains(n) && !intervention.assignments.contains_key(n))
        .collect()
}
