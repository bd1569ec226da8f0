//! Full vs sparse cost table over sequence lengths and sparsity buckets.

use std::collections::BTreeMap;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use vidsparse_core::dispatcher::{calibrate, CalibrateConfig};

use super::Command;
use crate::manifest::{Outputs, SeriesRow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateCommand {
    pub lengths: Vec<usize>,
    /// Sparsity levels; each is measured in its 0.05 bucket.
    pub sparsities: Vec<f64>,
    pub calibrate: CalibrateConfig,
}

impl Default for CalibrateCommand {
    fn default() -> Self {
        CalibrateCommand {
            lengths: vec![256, 512, 1024, 2048],
            sparsities: (0..20).map(|b| b as f64 / 20.0).collect(),
            calibrate: CalibrateConfig::default(),
        }
    }
}

impl Command for CalibrateCommand {
    const NAME: &'static str = "calibrate";
    const SEED_PATH: Option<&'static [&'static str]> = Some(&["calibrate", "seed"]);

    fn seed(&self) -> Option<u64> {
        Some(self.calibrate.seed)
    }

    fn run(&self, out: &mut Outputs) -> anyhow::Result<()> {
        let table = calibrate(&self.lengths, &self.sparsities, &self.calibrate)?;
        let mut csv = Vec::new();
        table.write_csv(&mut csv)?;
        out.bytes("cost_table.csv", &csv)?;
        let crossover: BTreeMap<String, Option<f64>> = table.lengths().into_iter().map(|l| (l.to_string(), table.crossover(l))).collect();
        out.json("crossover.json", &crossover)?;
        let speedup: Vec<SeriesRow> = table
            .entries
            .iter()
            .map(|e| SeriesRow { x: e.sparsity(), y: e.full_time / e.sparse_time, series: format!("S={}", e.length) })
            .collect();
        out.csv("speedup.csv", &speedup)?;
        Ok(())
    }
}
