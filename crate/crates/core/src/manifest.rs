//! Run manifests: everything needed to re-run an experiment and to load
//! its exported artifacts.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::hashing::HashSpec;
use crate::train::TrainConfig;
use crate::{Error, Result};

pub const MANIFEST_VERSION: u16 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ARTIFACT_VERSION: &str = concat!("cerp-core ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFingerprint {
    /// Raw interaction file, when known.
    pub source: Option<String>,
    pub source_sha256: String,
    pub split_dir: String,
    /// Hash over the three partition files.
    pub split_sha256: String,
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTime {
    pub phase: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub topn: usize,
    pub ndcg: f64,
    pub recall: f64,
    pub users: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub validation: Option<Metrics>,
    pub test: Option<Metrics>,
    pub kept_ratio: f64,
    pub pruned_fraction: f64,
    pub avg_dim: f64,
    pub overlap_rate: f64,
}

/// Names of the exported files, relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ExportFiles {
    Codebooks { p: String, q: String, scorer: String },
    Table { table: String, scorer: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub manifest_version: u16,
    pub artifact_version: String,
    pub config: TrainConfig,
    pub dataset: DatasetFingerprint,
    pub num_users: usize,
    pub num_items: usize,
    /// Absent for the uniform-dimension baseline.
    pub hash_spec: Option<HashSpec>,
    /// Width actually trained (`d` for codebooks, `d'` for the baseline).
    pub trained_dim: usize,
    pub regularizer_disabled: bool,
    pub stalled: bool,
    pub timestamps: Vec<PhaseTime>,
    pub metrics: FinalMetrics,
    pub export: Option<ExportFiles>,
}

impl ExperimentManifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Reads `manifest.json` from `dir`, refusing other manifest versions.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let raw: serde_json::Value = serde_json::from_str(&text)?;
        let found = raw
            .get("manifest_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Format(format!("{}: no manifest_version", path.display())))?;
        if found != MANIFEST_VERSION as u64 {
            return Err(Error::Version {
                found: u16::try_from(found).unwrap_or(u16::MAX),
                expected: MANIFEST_VERSION,
            });
        }
        let manifest: Self = serde_json::from_value(raw)?;
        if let Some(spec) = manifest.hash_spec {
            HashSpec::new(spec.num_entities(), spec.bucket_size())?;
        }
        Ok(manifest)
    }
}

pub fn unix_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}
