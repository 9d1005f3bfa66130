//! Everything needed to answer counterfactual queries, loaded together.

use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::latent_edit::{fit_regression, regression_pairs, VolumeRegression};
use crate::mechanisms::ModelFile;
use crate::phantom::{GridSpec, MappingNetwork, PhantomGenerator, VOLUME_NAMES};
use crate::reference::reference_mechanisms;
use crate::scm::CausalGraph;

#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub model: ModelFile,
    pub regression: VolumeRegression,
    pub generator: PhantomGenerator,
}

#[derive(Debug, Clone, Serialize)]
pub struct VariableInfo {
    pub name: String,
    pub kind: String,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

/// Public description of a loaded bundle.
#[derive(Debug, Clone, Serialize)]
pub struct ModelInfo {
    pub variables: Vec<VariableInfo>,
    pub edges: Vec<(String, String)>,
    pub graph_sha256: String,
    pub grid: GridSpec,
    pub style_dim: usize,
    pub volumes: Vec<String>,
    pub regression_r_squared: Vec<(String, f64)>,
    pub regression_sha256: String,
    pub slice_axes: Vec<String>,
}

impl ModelBundle {
    /// Reference mechanisms with a regression fitted on `samples` generated pairs.
    pub fn reference(samples: usize, seed: u64) -> Result<Self> {
        let generator = PhantomGenerator::default();
        let (w, v) = regression_pairs(&generator, &MappingNetwork::default(), samples, seed)?;
        let regression = fit_regression(&w, &v)?;
        let model = ModelFile::new(CausalGraph::alzheimers(), reference_mechanisms(), seed, None);
        Ok(ModelBundle {
            model,
            regression,
            generator,
        })
    }

    pub fn load(scm: &Path, regression: &Path) -> Result<Self> {
        let model = ModelFile::load(scm)?;
        let regression = VolumeRegression::load(regression)?;
        let generator = PhantomGenerator::default();
        if regression.dim != generator.style_dim() {
            return Err(crate::Error::Dimension {
                expected: format!("regression over {} style dims", generator.style_dim()),
                got: regression.dim.to_string(),
            });
        }
        Ok(ModelBundle {
            model,
            regression,
            generator,
        })
    }

    pub fn info(&self) -> ModelInfo {
        let graph = &self.model.graph;
        ModelInfo {
            variables: graph
                .variables
                .iter()
                .map(|v| VariableInfo {
                    name: v.name.clone(),
                    kind: format!("{:?}", v.kind).to_lowercase(),
                    lower: v.bounds.map(|b| b.0),
                    upper: v.bounds.map(|b| b.1),
                })
                .collect(),
            edges: graph.edges.clone(),
            graph_sha256: self.model.graph_sha256.clone(),
            grid: self.generator.grid,
            style_dim: self.generator.style_dim(),
            volumes: VOLUME_NAMES.iter().map(|s| s.to_string()).collect(),
            regression_r_squared: self
                .regression
                .fits
                .iter()
                .map(|(k, f)| (k.clone(), f.r_squared))
                .collect(),
            regression_sha256: self.regression.provenance_sha256.clone(),
            slice_axes: ["sagittal", "coronal", "axial"].map(String::from).to_vec(),
        }
    }
}
