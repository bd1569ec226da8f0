//! Hybrid context-parallel planning from a sparsity profile and a cluster.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use vidsparse_core::CriticalIndexSet;
use vidsparse_cp::{solve_hybrid, AlphaSource, AttnShape, ClusterSpec, HeadLoadVector, Placement};

use super::Command;
use crate::config::Fail;
use crate::manifest::Outputs;

/// Per-head sparsity of one attention layer and the remote-KV fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct PlanProfile {
    pub shape: AttnShape,
    pub head_sparsity: Vec<f64>,
    /// Uniform remote fraction, used when `index_sets` is absent.
    pub alpha: f64,
    /// Per-head `S x S` index sets; loads and remote fractions are then
    /// counted exactly.
    pub index_sets: Option<Vec<CriticalIndexSet>>,
}

impl Default for PlanProfile {
    fn default() -> Self {
        PlanProfile { shape: AttnShape { seq_len: 4096, head_dim: 64 }, head_sparsity: Vec::new(), alpha: 0.1, index_sets: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct PlanConfig {
    pub profile: PlanProfile,
    pub cluster: ClusterSpec,
}

#[derive(Debug, Serialize)]
struct CandidateRow {
    g_h: usize,
    g_s: usize,
    placement: Placement,
    max_burden: u64,
    optimal_balance: bool,
    objective: f64,
    peak_mem_bytes: f64,
    feasible: bool,
}

impl Command for PlanConfig {
    const NAME: &'static str = "plan";
    const SEED_PATH: Option<&'static [&'static str]> = None;

    fn seed(&self) -> Option<u64> {
        None
    }

    fn run(&self, out: &mut Outputs) -> anyhow::Result<()> {
        let p = &self.profile;
        let (loads, alpha) = match &p.index_sets {
            Some(sets) => (HeadLoadVector::from_index_sets(sets, p.shape.head_dim), AlphaSource::Indices(sets)),
            None => {
                if p.head_sparsity.is_empty() {
                    return Err(Fail::Config("profile has neither head_sparsity nor index_sets".into()).into());
                }
                (HeadLoadVector::from_sparsity(&p.head_sparsity, p.shape.seq_len, p.shape.head_dim)?, AlphaSource::Uniform(p.alpha))
            }
        };
        let solution = solve_hybrid(&loads, alpha, p.shape, &self.cluster)?;
        out.json("cp_config.json", &solution.best)?;
        out.json("candidates.json", &solution.candidates)?;
        let rows: Vec<CandidateRow> = solution
            .candidates
            .iter()
            .map(|c| CandidateRow {
                g_h: c.layout.g_h,
                g_s: c.layout.g_s,
                placement: c.layout.placement,
                max_burden: c.plan.max_burden,
                optimal_balance: c.plan.optimal,
                objective: c.objective,
                peak_mem_bytes: c.peak_mem_bytes,
                feasible: c.feasible,
            })
            .collect();
        out.csv("candidates.csv", &rows)?;
        Ok(())
    }
}
