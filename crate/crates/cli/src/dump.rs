//! Posterior dumps: what a fit writes and what can be reloaded.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use vmp_core::FitReport;

use crate::error::{CliError, Result};
use crate::spec::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDump {
    pub family: String,
    pub dim: usize,
    pub plates: Vec<usize>,
    /// One row-major block per natural-parameter block.
    pub natural: Vec<Vec<f64>>,
    pub moments: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDump {
    pub nodes: BTreeMap<String, NodeDump>,
    pub elbo_trace: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
    pub ms_per_sweep: Vec<f64>,
}

impl PosteriorDump {
    /// Posteriors of every declared node that is not fully observed.
    pub fn capture(model: &Model, report: &FitReport) -> Result<Self> {
        let g = &model.graph;
        let mut nodes = BTreeMap::new();
        for (name, id) in &model.nodes {
            let Ok(Some(family)) = g.family(*id) else { continue };
            if g.is_fully_observed(*id).map_err(CliError::Numerical)? {
                continue;
            }
            let dump = NodeDump {
                family: family.name().to_string(),
                dim: family.dim(),
                plates: g.plates(*id).map_err(CliError::Numerical)?.to_vec(),
                natural: g.natural(*id).map_err(CliError::Numerical)?,
                moments: g.moments(*id).map_err(CliError::Numerical)?,
            };
            nodes.insert(name.clone(), dump);
        }
        Ok(Self {
            nodes,
            elbo_trace: report.elbo.clone(),
            sweeps: report.sweeps,
            converged: report.converged,
            ms_per_sweep: report.ms_per_sweep.clone(),
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("dump serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::from_json(&e))
    }

    /// Load the dumped posteriors into `model` (built and observed as for
    /// the fit) and return the resulting bound.
    pub fn restore(&self, model: &mut Model) -> Result<f64> {
        for (name, node) in &self.nodes {
            let id = model
                .id(name)
                .ok_or_else(|| CliError::validation(format!("dump.nodes.{name}"), "no such node in the spec"))?;
            model
                .graph
                .set_natural(id, node.natural.clone())
                .map_err(|e| CliError::validation(format!("dump.nodes.{name}"), e.to_string()))?;
        }
        model.graph.elbo().map_err(CliError::Numerical)
    }
}
