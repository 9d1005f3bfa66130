use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariableKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    pub kind: VariableKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<(f64, f64)>,
}

impl VariableSpec {
    pub fn continuous(name: &str, bounds: Option<(f64, f64)>) -> Self {
        VariableSpec {
            name: name.to_string(),
            kind: VariableKind::Continuous,
            bounds,
        }
    }

    pub fn binary(name: &str) -> Self {
        VariableSpec {
            name: name.to_string(),
            kind: VariableKind::Binary,
            bounds: Some((0.0, 1.0)),
        }
    }

    pub fn check_value(&self, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::non_finite(format!("value for `{}`", self.name)));
        }
        match self.kind {
            VariableKind::Binary if value != 0.0 && value != 1.0 => Err(Error::OutOfBounds {
                name: self.name.clone(),
                value,
                lower: 0.0,
                upper: 1.0,
            }),
            _ => match self.bounds {
                Some((lower, upper)) if value < lower || value > upper => Err(Error::OutOfBounds {
                    name: self.name.clone(),
                    value,
                    lower,
                    upper,
                }),
                _ => Ok(()),
            },
        }
    }

    /// Clamps into bounds; returns the clamped value and whether it moved.
    pub fn clamp(&self, value: f64) -> (f64, bool) {
        match self.bounds {
            Some((lo, _)) if value < lo => (lo, true),
            Some((_, hi)) if value > hi => (hi, true),
            _ => (value, false),
        }
    }
}

/// Distribution of a root variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Prior {
    /// Normal, truncated to the variable's bounds when present.
    Normal { mean: f64, std: f64 },
    Bernoulli { p: f64 },
    Uniform { low: f64, high: f64 },
}

/// Causal DAG over scalar variables plus the subset that drives the image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalGraph {
    pub variables: Vec<VariableSpec>,
    pub edges: Vec<(String, String)>,
    #[serde(default)]
    pub image_parents: Vec<String>,
    #[serde(default)]
    pub priors: BTreeMap<String, Prior>,
}

impl CausalGraph {
    /// The Alzheimer's graph: age and sex drive MMSE; all three drive the
    /// brain, ventricle and grey-matter volumes, which parent the image.
    pub fn alzheimers() -> Self {
        let variables = vec![
            VariableSpec::continuous("age", Some((50.0, 95.0))),
            VariableSpec::binary("sex"),
            VariableSpec::continuous("mmse", Some((0.0, 30.0))),
            VariableSpec::continuous("brain", Some((900.0, 1800.0))),
            VariableSpec::continuous("ventricle", Some((5.0, 150.0))),
            VariableSpec::continuous("gm", Some((300.0, 800.0))),
        ];
        let mut edges = vec![
            ("age".to_string(), "mmse".to_string()),
            ("sex".to_string(), "mmse".to_string()),
        ];
        for child in ["brain", "ventricle", "gm"] {
            for parent in ["age", "sex", "mmse"] {
                edges.push((parent.to_string(), child.to_string()));
            }
        }
        let mut priors = BTreeMap::new();
        priors.insert(
            "age".to_string(),
            Prior::Normal {
                mean: 72.0,
                std: 8.0,
            },
        );
        priors.insert("sex".to_string(), Prior::Bernoulli { p: 0.5 });
        CausalGraph {
            variables,
            edges,
            image_parents: vec!["brain".into(), "ventricle".into(), "gm".into()],
            priors,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let graph: CausalGraph = serde_json::from_str(text)?;
        graph.validate_and_order()?;
        Ok(graph)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    pub fn variable(&self, name: &str) -> Result<&VariableSpec> {
        self.variables
            .iter()
            .find(|v| v.name == name)
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    /// Parents of `name` in declaration order.
    pub fn parents(&self, name: &str) -> Vec<&str> {
        let mut parents: Vec<&str> = self
            .edges
            .iter()
            .filter(|(_, c)| c == name)
            .map(|(p, _)| p.as_str())
            .collect();
        parents.sort_by_key(|p| self.index_of(p));
        parents
    }

    pub fn is_root(&self, name: &str) -> bool {
        !self.edges.iter().any(|(_, c)| c == name)
    }

    /// Checks structure and returns a topological order. Ties are broken by
    /// declaration order, so the result is deterministic.
    pub fn validate_and_order(&self) -> Result<Vec<String>> {
        let mut seen = HashMap::new();
        for (i, v) in self.variables.iter().enumerate() {
            if seen.insert(v.name.as_str(), i).is_some() {
                return Err(Error::DuplicateVariable(v.name.clone()));
            }
            match (v.kind, v.bounds) {
                (VariableKind::Binary, b) if b != Some((0.0, 1.0)) => {
                    return Err(Error::InvalidVariable {
                        name: v.name.clone(),
                        reason: "binary variables must have bounds [0, 1]".into(),
                    })
                }
                (_, Some((lo, hi))) if !(lo < hi) => {
                    return Err(Error::InvalidVariable {
                        name: v.name.clone(),
                        reason: format!("lower bound {lo} is not below upper bound {hi}"),
                    })
                }
                _ => {}
            }
        }
        let n = self.variables.len();
        let mut children = vec![Vec::new(); n];
        let mut indegree = vec![0usize; n];
        for (p, c) in &self.edges {
            let pi = *seen
                .get(p.as_str())
                .ok_or_else(|| Error::UnknownVariable(p.clone()))?;
            let ci = *seen
                .get(c.as_str())
                .ok_or_else(|| Error::UnknownVariable(c.clone()))?;
            children[pi].push(ci);
            indegree[ci] += 1;
        }
        for name in self.image_parents.iter().chain(self.priors.keys()) {
            if !seen.contains_key(name.as_str()) {
                return Err(Error::UnknownVariable(name.clone()));
            }
        }

        // Kahn's algorithm, always taking the earliest-declared ready node.
        let mut order = Vec::with_capacity(n);
        let mut ready: std::collections::BTreeSet<usize> =
            (0..n).filter(|&i| indegree[i] == 0).collect();
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &c in &children[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        if order.len() < n {
            return Err(Error::Cycle(self.find_cycle(&children, &indegree)));
        }
        Ok(order
            .into_iter()
            .map(|i| self.variables[i].name.clone())
            .collect())
    }

    fn find_cycle(&self, children: &[Vec<usize>], indegree: &[usize]) -> Vec<String> {
        // Every node left with positive indegree lies on or downstream of a
        // cycle; walking predecessors inside that set must revisit a node.
        let stuck: Vec<bool> = indegree.iter().map(|&d| d > 0).collect();
        let start = stuck.iter().position(|&s| s).unwrap_or(0);
        let mut path = vec![start];
        let mut pos = HashMap::from([(start, 0usize)]);
        let mut node = start;
        loop {
            let pred = (0..children.len())
                .find(|&p| stuck[p] && children[p].contains(&node))
                .expect("stuck node has a stuck predecessor");
            if let Some(&at) = pos.get(&pred) {
                let mut cycle: Vec<String> = path[at..]
                    .iter()
                    .rev()
                    .map(|&i| self.variables[i].name.clone())
                    .collect();
                cycle.push(cycle[0].clone());
                return cycle;
            }
            pos.insert(pred, path.len());
            path.push(pred);
            node = pred;
        }
    }

    /// All variables reachable from any of `sources` (sources excluded).
    pub fn descendants(&self, sources: &[&str]) -> std::collections::BTreeSet<String> {
        let mut out = std::collections::BTreeSet::new();
        let mut stack: Vec<&str> = sources.to_vec();
        while let Some(n) = stack.pop() {
            for (p, c) in &self.edges {
                if p == n && out.insert(c.clone()) {
                    stack.push(c);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_graph_orders_by_declaration() {
        let g = CausalGraph::alzheimers();
        let order = g.validate_and_order().unwrap();
        assert_eq!(order, ["age", "sex", "mmse", "brain", "ventricle", "gm"]);
        assert_eq!(g.parents("gm"), ["age", "sex", "mmse"]);
        assert_eq!(g.image_parents, ["brain", "ventricle", "gm"]);
    }

    #[test]
    fn two_cycle_is_reported() {
        let g = CausalGraph {
            variables: vec![
                VariableSpec::continuous("x", None),
                VariableSpec::continuous("y", None),
            ],
            edges: vec![("x".into(), "y".into()), ("y".into(), "x".into())],
            image_parents: vec![],
            priors: BTreeMap::new(),
        };
        match g.validate_and_order() {
            Err(Error::Cycle(c)) => {
                assert_eq!(c.len(), 3);
                assert_eq!(c.first(), c.last());
            }
            other => panic!("expected cycle, got {other:?}"),
        }
    }

    #[test]
    fn longer_cycle_names_its_members() {
        let g = CausalGraph {
            variables: ["r", "a", "b", "c"]
                .iter()
                .map(|n| VariableSpec::continuous(n, None))
                .collect(),
            edges: [("r", "a"), ("a", "b"), ("b", "c"), ("c", "a")]
                .iter()
                .map(|(p, c)| (p.to_string(), c.to_string()))
                .collect(),
            image_parents: vec![],
            priors: BTreeMap::new(),
        };
        let Err(Error::Cycle(c)) = g.validate_and_order() else {
            panic!("expected cycle")
        };
        let mut members: Vec<_> = c[..c.len() - 1].to_vec();
        members.sort();
        assert_eq!(members, ["a", "b", "c"]);
    }

    #[test]
    fn single_variable() {
        let g = CausalGraph {
            variables: vec![VariableSpec::continuous("x", None)],
            edges: vec![],
            image_parents: vec![],
            priors: BTreeMap::new(),
        };
        assert_eq!(g.validate_and_order().unwrap(), ["x"]);
    }

    #[test]
    fn unknown_endpoint_and_bad_bounds() {
        let mut g = CausalGraph::alzheimers();
        g.edges.push(("age".into(), "apoe".into()));
        assert!(matches!(
            g.validate_and_order(),
            Err(Error::UnknownVariable(n)) if n == "apoe"
        ));

        let mut g = CausalGraph::alzheimers();
        g.variables[2].bounds = Some((30.0, 0.0));
        assert!(matches!(
            g.validate_and_order(),
            Err(Error::InvalidVariable { .. })
        ));

        let mut g = CausalGraph::alzheimers();
        g.variables.push(VariableSpec::binary("age"));
        assert!(matches!(
            g.validate_and_order(),
            Err(Error::DuplicateVariable(_))
        ));
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let g = CausalGraph::alzheimers();
        let back = CausalGraph::from_json(&g.to_json()).unwrap();
        assert_eq!(g, back);
        assert_eq!(back.to_json(), g.to_json());
    }

    #[test]
    fn descendants_of_mmse() {
        let g = CausalGraph::alzheimers();
        let d = g.descendants(&["mmse"]);
        assert_eq!(
            d.into_iter().collect::<Vec<_>>(),
            ["brain", "gm", "ventricle"]
        );
    }
}
