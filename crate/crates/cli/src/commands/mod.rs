pub mod analyze;
pub mod calibrate;
pub mod plan;
pub mod simulate;
pub mod train;

use schemars::JsonSchema;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::manifest::Outputs;

/// A command is its resolved config plus the work it does with it.
pub trait Command: Serialize + DeserializeOwned + Default + JsonSchema {
    const NAME: &'static str;
    /// Config path that `--seed` overrides; `None` for unseeded commands.
    const SEED_PATH: Option<&'static [&'static str]>;

    fn seed(&self) -> Option<u64>;

    fn run(&self, out: &mut Outputs) -> anyhow::Result<()>;
}
