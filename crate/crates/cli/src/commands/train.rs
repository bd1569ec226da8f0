//! Two-stage toy training run.

use vidsparse_core::trainer::{ToyDiTConfig, Trainer};

use super::Command;
use crate::manifest::{list_files, Outputs, SeriesRow};

impl Command for ToyDiTConfig {
    const NAME: &'static str = "train";
    const SEED_PATH: Option<&'static [&'static str]> = Some(&["seed"]);

    fn seed(&self) -> Option<u64> {
        Some(self.seed)
    }

    fn run(&self, out: &mut Outputs) -> anyhow::Result<()> {
        let mut trainer = Trainer::new(self.clone(), None)?;
        trainer.run()?;
        let before = list_files(&out.dir)?;
        trainer.write_outputs(&out.dir)?;
        for f in list_files(&out.dir)?.into_iter().filter(|f| !before.contains(f)) {
            out.adopt(&f);
        }
        let trend: Vec<SeriesRow> = trainer
            .state()
            .profile_log
            .iter()
            .map(|p| SeriesRow { x: p.iteration as f64, y: p.ema, series: format!("b{}h{}", p.block, p.head) })
            .collect();
        out.csv("sparsity.csv", &trend)?;
        let table = trainer.table();
        let mut csv = Vec::new();
        table.write_csv(&mut csv)?;
        out.bytes("cost_table.csv", &csv)?;
        Ok(())
    }
}
