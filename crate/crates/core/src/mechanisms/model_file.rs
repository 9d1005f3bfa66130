use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EpochLoss, MechanismKind, MechanismSet, TrainConfig};
use crate::error::{Error, Result};
use crate::scm::{CausalGraph, StructuralMechanism};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub kind: MechanismKind,
    pub config: TrainConfig,
    pub rows: usize,
    /// Loss at the selected epoch, per target.
    pub selected: BTreeMap<String, EpochLoss>,
}

/// Serialized trained SCM: graph, mechanisms and how they were trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub graph: CausalGraph,
    pub graph_sha256: String,
    pub seed: u64,
    pub mechanisms: MechanismSet,
    pub training: Option<TrainingMetadata>,
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl ModelFile {
    pub fn new(graph: CausalGraph, mechanisms: MechanismSet, seed: u64, training: Option<TrainingMetadata>) -> Self {
        let graph_sha256 = sha256_hex(graph.to_json().as_bytes());
        ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            graph,
            graph_sha256,
            seed,
            mechanisms,
            training,
        }
    }

    /// Checks version, graph digest and that every non-root variable has a
    /// mechanism with the graph's parent list.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::FormatVersion(self.format_version));
        }
        let digest = sha256_hex(self.graph.to_json().as_bytes());
        if digest != self.graph_sha256 {
            return Err(Error::InvalidConfig(format!(
                "graph digest {} does not match embedded graph ({digest})",
                self.graph_sha256
            )));
        }
        let order = self.graph.validate_and_order()?;
        for name in order.iter().filter(|n| !self.graph.is_root(n)) {
            let m = self
                .mechanisms
                .get(name)
                .ok_or_else(|| Error::MissingMechanism(name.clone()))?;
            let want = self.graph.parents(name);
            if m.parent_names() != want.as_slice() {
                return Err(Error::VariableMismatch(format!(
                    "mechanism `{name}` has parents [{}], graph says [{}]",
                    m.parent_names().join(", "),
                    want.join(", ")
                )));
            }
            if !m.net().all_finite() {
                return Err(Error::non_finite(format!("parameters of `{name}`")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let probe: serde_json::Value = serde_json::from_str(text)?;
        if let Some(v) = probe.get("format_version").and_then(|v| v.as_u64()) {
            if v != u64::from(MODEL_FORMAT_VERSION) {
                return Err(Error::FormatVersion(v as u32));
            }
        }
        let model: ModelFile = serde_json::from_value(probe)?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::dataset_io::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanisms::{linear_gaussian, Mechanism};

    fn model() -> ModelFile {
        let graph = CausalGraph::alzheimers();
        let mut set = MechanismSet::default();
        for t in ["mmse", "brain", "ventricle", "gm"] {
            let parents = graph.parents(t);
            let w = vec![0.5; parents.len()];
            set.insert(Mechanism::ConditionalAffine(linear_gaussian(t, &parents, &w, 1.0, 2.0)));
        }
        ModelFile::new(graph, set, 7, None)
    }

    #[test]
    fn round_trip_is_exact() {
        let m = model();
        let back = ModelFile::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_wrong_version_and_tampered_graph() {
        let m = model();
        let text = m.to_json().replace("\"format_version\": 1", "\"format_version\": 99");
        assert!(matches!(ModelFile::from_json(&text), Err(Error::FormatVersion(99))));
        let mut t = m.clone();
        t.graph.edges.pop();
        assert!(ModelFile::from_json(&t.to_json()).is_err());
        let mut t = m;
        t.mechanisms.mechanisms.remove("gm");
        t.graph_sha256 = sha256_hex(t.graph.to_json().as_bytes());
        assert!(matches!(ModelFile::from_json(&t.to_json()), Err(Error::MissingMechanism(_))));
    }
}
