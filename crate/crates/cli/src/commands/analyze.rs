//! Score-distribution, locality, sparsity and grouping statistics for a
//! synthetic model or a trained checkpoint.

use std::path::PathBuf;

use anyhow::Context;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use vidsparse_core::analysis::{analyze_distribution, LocalityReport, HISTOGRAM_EDGES};
use vidsparse_core::attention::{attention_scores, critical_kv_oracle, head_sparsity};
use vidsparse_core::grouping::{build_groups, plan_overlap, GroupDims, SetRule};
use vidsparse_core::io::read_tensor;
use vidsparse_core::synth::{smooth_field, FieldConfig};
use vidsparse_core::trainer::{ToyDiTConfig, Trainer};
use vidsparse_core::{Matrix, TokenGrid};

use super::Command;
use crate::config::Fail;
use crate::manifest::{Outputs, RunManifest, SeriesRow, MANIFEST_FILE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticModel {
    /// Zero queries: every score row is uniform.
    Uniform,
    /// Queries and keys are smooth fields over the grid.
    Smooth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeConfig {
    pub seed: u64,
    pub grid: TokenGrid,
    pub heads: usize,
    pub d_k: usize,
    pub model: SyntheticModel,
    /// Multiplier on smooth query/key fields.
    pub scale: f64,
    pub theta: f64,
    pub group: GroupDims,
    /// Output directory of a `train` run; replaces the synthetic model.
    pub checkpoint: Option<PathBuf>,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        AnalyzeConfig {
            seed: 0,
            grid: TokenGrid { frames: 2, height: 8, width: 8 },
            heads: 4,
            d_k: 16,
            model: SyntheticModel::Smooth,
            scale: 2.5,
            theta: 0.9,
            group: GroupDims { gt: 2, gh: 2, gw: 2 },
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadReport {
    pub block: usize,
    pub head: usize,
    pub histogram: [f64; 6],
    pub mean_top_mass: f64,
    pub concentrated_fraction: f64,
    pub locality: Option<LocalityReport>,
    /// Oracle sparsity at `theta`.
    pub sparsity: f64,
    /// Mean proxy overlap of the configured voxel groups.
    pub group_overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalyzeReport {
    pub source: String,
    pub tokens: usize,
    pub theta: f64,
    pub group: GroupDims,
    pub heads: Vec<HeadReport>,
}

/// `(block, head, Q, K)` over `grid`.
type HeadInputs = (TokenGrid, Vec<(usize, usize, Matrix, Matrix)>);

fn synthetic(cfg: &AnalyzeConfig) -> HeadInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let s = cfg.grid.len();
    let heads = (0..cfg.heads)
        .map(|h| {
            let (q, k) = match cfg.model {
                SyntheticModel::Uniform => (Matrix::zeros(s, cfg.d_k), Matrix::random_normal(s, cfg.d_k, 1.0, &mut rng)),
                SyntheticModel::Smooth => {
                    let f = FieldConfig::default();
                    let q = smooth_field(&cfg.grid, cfg.d_k, &f, &mut rng).scale(cfg.scale);
                    (q, smooth_field(&cfg.grid, cfg.d_k, &f, &mut rng).scale(cfg.scale))
                }
            };
            (0, h, q, k)
        })
        .collect();
    (cfg.grid, heads)
}

/// Rebuilds a trained model from a `train` output directory and records
/// every block's per-head Q, K on the first sample of its data stream.
fn from_checkpoint(dir: &std::path::Path) -> anyhow::Result<HeadInputs> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Fail::Io(format!("{}: {e}", manifest_path.display())))?;
    let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| Fail::Config(format!("{}: {e}", manifest_path.display())))?;
    if manifest.command != "train" {
        return Err(Fail::Config(format!("{} is a `{}` run, not a training run", dir.display(), manifest.command)).into());
    }
    let cfg: ToyDiTConfig = serde_json::from_value(manifest.config).map_err(|e| Fail::Config(e.to_string()))?;
    let mut trainer = Trainer::new(cfg.clone(), None)?;
    for (i, t) in trainer.params_mut().tensors_mut().into_iter().enumerate() {
        let p = dir.join("checkpoints/model").join(format!("{i:03}.svt"));
        let loaded: Matrix = read_tensor(&p).with_context(|| format!("loading {}", p.display()))?;
        if loaded.shape() != t.shape() {
            return Err(Fail::Config(format!("{}: shape {:?}, model expects {:?}", p.display(), loaded.shape(), t.shape())).into());
        }
        *t = loaded;
    }
    let sample = trainer.next_batch().swap_remove(0);
    let cache = trainer.forward(&sample)?;
    let mut heads = Vec::new();
    for b in 0..cfg.blocks {
        for h in 0..cfg.heads {
            let (q, k, _) = cache.head_qkv(b, h);
            heads.push((b, h, q.clone(), k.clone()));
        }
    }
    Ok((cfg.grid, heads))
}

impl Command for AnalyzeConfig {
    const NAME: &'static str = "analyze";
    const SEED_PATH: Option<&'static [&'static str]> = Some(&["seed"]);

    fn seed(&self) -> Option<u64> {
        Some(self.seed)
    }

    fn run(&self, out: &mut Outputs) -> anyhow::Result<()> {
        let (grid, inputs, source) = match &self.checkpoint {
            Some(dir) => {
                let (g, i) = from_checkpoint(dir)?;
                (g, i, format!("checkpoint:{}", dir.display()))
            }
            None => {
                let (g, i) = synthetic(self);
                (g, i, format!("synthetic:{}", serde_json::to_value(self.model)?.as_str().unwrap_or_default()))
            }
        };
        let plan = build_groups(&grid, self.group)?;
        let mut heads = Vec::new();
        let (mut hist_rows, mut sparsity_rows) = (Vec::new(), Vec::new());
        for (block, head, q, k) in &inputs {
            let scores = attention_scores(q, k)?;
            let dist = analyze_distribution(&scores, Some((&grid, self.theta)))?;
            let sparsity = head_sparsity(&critical_kv_oracle(&scores, self.theta)?, k.rows())?;
            let group_overlap = plan_overlap(&plan, std::slice::from_ref(q), std::slice::from_ref(k), SetRule::Theta(self.theta), self.seed)?;
            let label = format!("b{block}h{head}");
            for (edge, frac) in HISTOGRAM_EDGES.iter().zip(dist.histogram) {
                hist_rows.push(SeriesRow { x: *edge, y: frac, series: label.clone() });
            }
            sparsity_rows.push(SeriesRow { x: (block * 1000 + head) as f64, y: sparsity, series: "oracle-sparsity".into() });
            heads.push(HeadReport {
                block: *block,
                head: *head,
                histogram: dist.histogram,
                mean_top_mass: dist.mean_top_mass,
                concentrated_fraction: dist.concentrated_fraction,
                locality: dist.locality,
                sparsity,
                group_overlap,
            });
        }
        out.json("report.json", &AnalyzeReport { source, tokens: grid.len(), theta: self.theta, group: self.group, heads })?;
        out.csv("histogram.csv", &hist_rows)?;
        out.csv("sparsity.csv", &sparsity_rows)?;
        Ok(())
    }
}
