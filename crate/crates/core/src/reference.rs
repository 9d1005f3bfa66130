//! Known-truth structural model for the default graph.
//!
//! Volumes fall with age, rise with the cognitive score and differ by sex;
//! ventricles grow with age and shrink with the score. Training on its
//! samples gives the default model shipped with the tools.

use crate::error::Result;
use crate::mechanisms::{linear_gaussian, Mechanism, MechanismSet};
use crate::scm::{sample_prior, CausalGraph, PriorSample};

/// Ground-truth linear-Gaussian mechanisms for [`CausalGraph::alzheimers`].
pub fn reference_mechanisms() -> MechanismSet {
    // (target, weights on (age, sex, mmse), value at age 72 / sex 0.5 / mmse 26, noise std)
    let volumes = [
        ("brain", [-4.0, 90.0, 6.0], 1354.0, 60.0),
        ("gm", [-2.5, 30.0, 5.0], 527.0, 25.0),
        ("ventricle", [1.0, 5.0, -2.0], 41.0, 8.0),
    ];
    let mut set = MechanismSet::default();
    set.insert(Mechanism::ConditionalAffine(linear_gaussian(
        "mmse",
        &["age", "sex"],
        &[-0.12, 0.0],
        26.0 + 0.12 * 72.0,
        3.0,
    )));
    for (target, w, center, sigma) in volumes {
        let bias = center - w[0] * 72.0 - w[1] * 0.5 - w[2] * 26.0;
        set.insert(Mechanism::ConditionalAffine(linear_gaussian(
            target,
            &["age", "sex", "mmse"],
            &w,
            bias,
            sigma,
        )));
    }
    set
}

/// `n` subjects drawn from the reference model.
pub fn reference_cohort(n: usize, seed: u64) -> Result<PriorSample> {
    sample_prior(&CausalGraph::alzheimers(), &reference_mechanisms(), seed, n)
}

/// Single-parent linear-Gaussian model `v = 2 a + 3 + 0.5 e` used to check
/// that training recovers a known conditional.
pub fn linear_recovery_model() -> (CausalGraph, MechanismSet) {
    use crate::scm::{Prior, VariableSpec};
    let graph = CausalGraph {
        variables: vec![
            VariableSpec::continuous("a", Some((50.0, 95.0))),
            VariableSpec::continuous("v", None),
        ],
        edges: vec![("a".into(), "v".into())],
        image_parents: Vec::new(),
        priors: [("a".to_string(), Prior::Uniform { low: 50.0, high: 95.0 })].into(),
    };
    let mut set = MechanismSet::default();
    set.insert(Mechanism::ConditionalAffine(linear_gaussian("v", &["a"], &[2.0], 3.0, 0.5)));
    (graph, set)
}
