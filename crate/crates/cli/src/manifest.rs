//! Run manifests and output helpers.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::Fail;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to rerun a command: the fully resolved config replaces
/// the file, environment and flag layers on replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub threads: Option<usize>,
    /// Extra input files by role (`profile`, `cluster`), as given.
    pub inputs: BTreeMap<String, PathBuf>,
    pub config: Value,
    pub versions: BTreeMap<String, String>,
    /// Files written, relative to `out_dir`, sorted.
    pub outputs: Vec<String>,
}

pub fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("vidsparse".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("format".to_string(), FORMAT_VERSION.to_string()),
    ])
}

/// Collects written files so the manifest can list them.
pub struct Outputs {
    pub dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self, Fail> {
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        Ok(Outputs { dir: dir.to_path_buf(), files: Vec::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn bytes(&mut self, name: &str, data: &[u8]) -> Result<(), Fail> {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
        }
        fs::write(&p, data).map_err(|e| io(&p, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), Fail> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Fail::Config(e.to_string()))?;
        text.push('\n');
        self.bytes(name, text.as_bytes())
    }

    pub fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<(), Fail> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r).map_err(|e| Fail::Io(e.to_string()))?;
        }
        let data = w.into_inner().map_err(|e| Fail::Io(e.to_string()))?;
        self.bytes(name, &data)
    }

    /// Registers files another writer already put under the output dir.
    pub fn adopt(&mut self, name: &str) {
        self.files.push(name.to_string());
    }

    pub fn finish(mut self, mut manifest: RunManifest) -> Result<RunManifest, Fail> {
        self.files.sort();
        self.files.dedup();
        manifest.outputs = self.files.clone();
        self.json(MANIFEST_FILE, &manifest)?;
        Ok(manifest)
    }
}

/// One point of a plot-ready series.
#[derive(Debug, Clone, Serialize)]
pub struct SeriesRow {
    pub x: f64,
    pub y: f64,
    pub series: String,
}

pub fn io(path: &Path, e: std::io::Error) -> Fail {
    Fail::Io(format!("{}: {e}", path.display()))
}

/// Relative paths of every file under `dir`, sorted.
pub fn list_files(dir: &Path) -> Result<Vec<String>, Fail> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<(), Fail> {
        for entry in fs::read_dir(dir).map_err(|e| io(dir, e))? {
            let p = entry.map_err(|e| io(dir, e))?.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                let rel = p.strip_prefix(root).expect("walked under root");
                out.push(rel.to_string_lossy().replace('\\', "/"));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}
