//! Config files and run records.
//!
//! A config file is TOML with optional `[field]`, `[train]`, `[render]` and
//! `[context]` tables, using the same keys as the library types. Command-line flags
//! win over the file, and the file wins over the regime preset.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::usage;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub field: Option<toml::Table>,
    pub train: Option<toml::Table>,
    pub render: Option<toml::Table>,
    pub context: Option<toml::Table>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).map_err(|e| usage(format!("config {}: {}", path.display(), e.message())))
    }
}

/// Render settings shared by every command that renders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSection {
    pub samples: usize,
    pub background: [f64; 3],
}

impl Default for RenderSection {
    fn default() -> Self {
        Self {
            samples: 128,
            background: [0.0; 3],
        }
    }
}

fn merge(base: &mut Value, over: Value, path: &str) -> Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b.get_mut(&k).ok_or_else(|| usage(format!("unknown config key `{here}`")))?;
                if slot.is_object() && v.is_object() {
                    merge(slot, v, &here)?;
                } else {
                    *slot = v;
                }
            }
            Ok(())
        }
        _ => Err(usage(format!("config `{path}` must be a table"))),
    }
}

/// `base` with the keys of `table` laid over it. Unknown keys are rejected.
pub fn overlay<T: Serialize + DeserializeOwned>(base: &T, table: Option<&toml::Table>, section: &str) -> Result<T> {
    let mut v = serde_json::to_value(base)?;
    if let Some(t) = table {
        merge(&mut v, serde_json::to_value(t)?, section)?;
    }
    serde_json::from_value(v).map_err(|e| usage(format!("config [{section}]: {e}")))
}

/// Reproducibility record written next to a command's output.
#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub command: String,
    pub args: Vec<String>,
    pub seed: Option<u64>,
    /// SHA-256 of the effective configuration below.
    pub config_hash: String,
    pub config_json: String,
    pub versions: BTreeMap<String, String>,
    pub started_unix_s: u64,
    pub elapsed_s: f64,
    pub outputs: BTreeMap<String, String>,
    pub results: BTreeMap<String, f64>,
}

pub struct Recorder {
    command: &'static str,
    started: Instant,
    started_unix_s: u64,
    pub seed: Option<u64>,
    pub config: Value,
    pub outputs: BTreeMap<String, String>,
    pub results: BTreeMap<String, f64>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Recorder {
    pub fn new(command: &'static str) -> Self {
        Self {
            command,
            started: Instant::now(),
            started_unix_s: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            seed: None,
            config: Value::Null,
            outputs: BTreeMap::new(),
            results: BTreeMap::new(),
        }
    }

    pub fn config(&mut self, key: &str, value: &impl Serialize) -> Result<()> {
        if !self.config.is_object() {
            self.config = Value::Object(Default::default());
        }
        self.config[key] = serde_json::to_value(value)?;
        Ok(())
    }

    pub fn output(&mut self, key: &str, path: &Path) {
        self.outputs.insert(key.to_string(), path.display().to_string());
    }

    pub fn finish(self) -> RunRecord {
        let config_json = serde_json::to_string(&self.config).expect("config serializes");
        let versions = BTreeMap::from([
            ("tpedit".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("checkpoint_format".to_string(), triplane_edit::io::CHECKPOINT_VERSION.to_string()),
        ]);
        RunRecord {
            command: self.command.to_string(),
            args: std::env::args().collect(),
            seed: self.seed,
            config_hash: sha256_hex(config_json.as_bytes()),
            config_json,
            versions,
            started_unix_s: self.started_unix_s,
            elapsed_s: self.started.elapsed().as_secs_f64(),
            outputs: self.outputs,
            results: self.results,
        }
    }
}

/// `<out>.run.toml`, next to the output.
pub fn record_path_for(out: &Path) -> PathBuf {
    let s = out.as_os_str().to_string_lossy();
    PathBuf::from(format!("{}.run.toml", s.trim_end_matches('/')))
}

pub fn write_record(path: &Path, record: &RunRecord) -> Result<()> {
    let text = toml::to_string(record).context("encoding run record")?;
    triplane_edit::io::atomic_write(path, text.as_bytes())?;
    Ok(())
}
