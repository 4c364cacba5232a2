//! Pipeline configuration: one TOML document with a section per stage.

use std::path::{Path, PathBuf};

use adicurb::annotator::AnnotatorConfig;
use adicurb::kitti_io::RingAssignment;
use adicurb::postprocess::PostprocessConfig;
use adicurb::synth::SceneSpec;
use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Environment variable naming the config file used when `--config` is absent.
pub const CONFIG_ENV: &str = "ADICURB_CONFIG";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub io: IoConfig,
    pub annotator: AnnotatorConfig,
    pub postprocess: PostprocessConfig,
    pub evaluation: EvaluationConfig,
    pub bench: BenchConfig,
    pub synth: SceneSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub num_rings: u32,
    pub ring_assignment: RingAssignment,
    /// Projection matrix key read from KITTI calibration files.
    pub camera: String,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self { num_rings: 64, ring_assignment: RingAssignment::ScanOrder, camera: "P2".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Matching tolerance in BEV pixels.
    pub tolerance: u32,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { tolerance: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub iterations: usize,
    /// Untimed iterations run first.
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { iterations: 100, warmup: 5 }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).context("parsing config")?;
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        toml::Value::Table(table).try_into().context("invalid config")
    }

    /// Load `path` (or the file named by [`CONFIG_ENV`], or defaults) and
    /// apply `key.path=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let path: Option<PathBuf> = path
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from));
        let mut table = match &path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    /// Canonical JSON: struct fields in declaration order, map keys sorted.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&value).expect("json value serializes")
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing config")
    }
}

/// Set `a.b.c = value` in `table`; the value is parsed as TOML and falls back
/// to a plain string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| anyhow!("override {assignment:?} is not of the form key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override {assignment:?} has an empty key segment");
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = parts.split_last().expect("non-empty key");
    let mut cur = table;
    for p in parents {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override {assignment:?}: {p} is not a table"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
