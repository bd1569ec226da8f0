//! `vidsparse`: analysis, calibration, training, planning and simulation
//! runs, each leaving a manifest that replays it exactly.

mod commands;
mod config;
mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};
use vidsparse_core::trainer::ToyDiTConfig;
use vidsparse_core::CoreError;
use vidsparse_cp::CpError;

use commands::analyze::AnalyzeConfig;
use commands::calibrate::CalibrateCommand;
use commands::plan::PlanConfig;
use commands::simulate::SimScenario;
use commands::Command;
use config::{env_layer, read_json, resolve, set_path, Fail};
use manifest::{versions, Outputs, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "vidsparse", version, about = "Sparse attention analysis, training and context-parallel planning")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// JSON config file (lowest-priority layer above the defaults).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to `vidsparse-out/<command>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for selection kernels.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Sparsity profile JSON for `plan`.
    #[arg(long, global = true)]
    profile: Option<PathBuf>,
    /// Cluster JSON for `plan`.
    #[arg(long, global = true)]
    cluster: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Score distribution, locality, sparsity and grouping statistics.
    Analyze,
    /// Full vs sparse cost table and crossover points.
    Calibrate,
    /// Two-stage toy training run.
    Train,
    /// Hybrid context-parallel configuration for a cluster.
    Plan,
    /// Message-level simulation with equivalence and byte checks.
    Simulate,
    /// Reruns a command from its manifest.
    Replay { manifest: PathBuf },
    /// Writes JSON schemas of every config type.
    Schema,
}

struct RunContext {
    out_dir: PathBuf,
    config_path: Option<PathBuf>,
    threads: Option<usize>,
    inputs: BTreeMap<String, PathBuf>,
}

fn execute<C: Command>(layers: Vec<Value>, ctx: &RunContext) -> anyhow::Result<()> {
    let (cfg, canonical) = resolve::<C>(layers)?;
    let mut out = Outputs::create(&ctx.out_dir)?;
    cfg.run(&mut out)?;
    let manifest = RunManifest {
        command: C::NAME.to_string(),
        config_path: ctx.config_path.clone(),
        seed: cfg.seed(),
        out_dir: ctx.out_dir.clone(),
        threads: ctx.threads,
        inputs: ctx.inputs.clone(),
        config: canonical,
        versions: versions(),
        outputs: Vec::new(),
    };
    out.finish(manifest)?;
    Ok(())
}

fn dispatch(name: &str, layers: Vec<Value>, ctx: &RunContext) -> anyhow::Result<()> {
    match name {
        AnalyzeConfig::NAME => execute::<AnalyzeConfig>(layers, ctx),
        CalibrateCommand::NAME => execute::<CalibrateCommand>(layers, ctx),
        ToyDiTConfig::NAME => execute::<ToyDiTConfig>(layers, ctx),
        PlanConfig::NAME => execute::<PlanConfig>(layers, ctx),
        SimScenario::NAME => execute::<SimScenario>(layers, ctx),
        other => Err(Fail::Config(format!("unknown command `{other}`")).into()),
    }
}

fn seed_path(name: &str) -> Option<&'static [&'static str]> {
    match name {
        AnalyzeConfig::NAME => AnalyzeConfig::SEED_PATH,
        CalibrateCommand::NAME => CalibrateCommand::SEED_PATH,
        ToyDiTConfig::NAME => ToyDiTConfig::SEED_PATH,
        PlanConfig::NAME => PlanConfig::SEED_PATH,
        _ => SimScenario::SEED_PATH,
    }
}

fn write_schemas(dir: &Path) -> anyhow::Result<()> {
    let mut out = Outputs::create(dir)?;
    out.json("analyze.schema.json", &schemars::schema_for!(AnalyzeConfig))?;
    out.json("calibrate.schema.json", &schemars::schema_for!(CalibrateCommand))?;
    out.json("train.schema.json", &schemars::schema_for!(ToyDiTConfig))?;
    out.json("plan.schema.json", &schemars::schema_for!(PlanConfig))?;
    out.json("simulate.schema.json", &schemars::schema_for!(SimScenario))?;
    out.json("manifest.schema.json", &schemars::schema_for!(RunManifest))?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Fail::Config("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let name = match &cli.command {
        Cmd::Analyze => AnalyzeConfig::NAME,
        Cmd::Calibrate => CalibrateCommand::NAME,
        Cmd::Train => ToyDiTConfig::NAME,
        Cmd::Plan => PlanConfig::NAME,
        Cmd::Simulate => SimScenario::NAME,
        Cmd::Schema => return write_schemas(cli.out.as_deref().unwrap_or(Path::new("schemas"))),
        Cmd::Replay { manifest } => {
            let text = std::fs::read_to_string(manifest).map_err(|e| manifest::io(manifest, e))?;
            let m: RunManifest = serde_json::from_str(&text).map_err(|e| Fail::Config(format!("{}: {e}", manifest.display())))?;
            let ctx = RunContext {
                out_dir: cli.out.unwrap_or_else(|| m.out_dir.clone()),
                config_path: m.config_path.clone(),
                threads: cli.threads.or(m.threads),
                inputs: m.inputs.clone(),
            };
            return dispatch(&m.command, vec![m.config], &ctx);
        }
    };

    let mut layers = Vec::new();
    if let Some(p) = &cli.config {
        layers.push(read_json(p)?);
    }
    layers.push(env_layer(&std::env::vars().collect::<Vec<_>>()));
    let mut flags = json!({});
    let mut inputs = BTreeMap::new();
    if let Some(seed) = cli.seed {
        let path = seed_path(name).ok_or_else(|| Fail::Config(format!("`{name}` takes no seed")))?;
        set_path(&mut flags, &path.iter().map(|s| s.to_string()).collect::<Vec<_>>(), json!(seed));
    }
    for (role, file) in [("profile", &cli.profile), ("cluster", &cli.cluster)] {
        if let Some(p) = file {
            if name != PlanConfig::NAME {
                return Err(Fail::Config(format!("--{role} only applies to `plan`")).into());
            }
            set_path(&mut flags, &[role.to_string()], read_json(p)?);
            inputs.insert(role.to_string(), p.clone());
        }
    }
    layers.push(flags);
    let ctx = RunContext {
        out_dir: cli.out.unwrap_or_else(|| Path::new("vidsparse-out").join(name)),
        config_path: cli.config,
        threads: cli.threads,
        inputs,
    };
    dispatch(name, layers, &ctx)
}

fn core_code(e: &CoreError) -> u8 {
    match e {
        CoreError::Io(_) => 1,
        CoreError::NonFinite(_) | CoreError::Diverged { .. } => 4,
        _ => 2,
    }
}

/// First classifiable cause in the chain decides the exit code.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Fail>() {
            return f.code();
        }
        if let Some(e) = cause.downcast_ref::<CpError>() {
            return match e {
                CpError::Infeasible { .. } => 3,
                CpError::InvalidInput { .. } => 2,
                CpError::Protocol(_) => 4,
                CpError::Core(c) => core_code(c),
            };
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return core_code(e);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<serde_json::Error>() {
            return if e.is_io() { 1 } else { 2 };
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
