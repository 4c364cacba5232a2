//! `run.json`, summaries and timing statistics.

use std::collections::BTreeMap;
use std::path::Path;

use adicurb::kitti_io::write_atomic;
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Stats {
    pub count: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

/// Nearest-rank percentile of an ascending slice, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

pub fn stats(samples: &[f64]) -> Stats {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    if s.is_empty() {
        return Stats::default();
    }
    Stats {
        count: s.len(),
        median_ms: percentile(&s, 0.5),
        p95_ms: percentile(&s, 0.95),
        min_ms: s[0],
        max_ms: s[s.len() - 1],
    }
}

/// Stats per stage name over a set of per-frame timing maps.
pub fn stage_stats<'a>(frames: impl IntoIterator<Item = &'a BTreeMap<String, f64>>) -> BTreeMap<String, Stats> {
    let mut by_stage: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for f in frames {
        for (k, &v) in f {
            by_stage.entry(k.clone()).or_default().push(v);
        }
    }
    by_stage.into_iter().map(|(k, v)| (k, stats(&v))).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub frames: usize,
    pub timings_ms: BTreeMap<String, f64>,
}

impl RunRecord {
    pub fn new(command: &str, config_hash: &str, frames: usize) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            frames,
            timings_ms: BTreeMap::new(),
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value).context("serializing json")?;
    text.push(b'\n');
    write_atomic(path, &text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_run(dir: &Path, record: &RunRecord) -> Result<()> {
    write_json(&dir.join("run.json"), record)
}
