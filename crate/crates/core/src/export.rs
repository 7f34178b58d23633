//! Deployable artifacts: CSR codebooks (or the baseline's full table), the
//! scorer in single precision, and loading them back for evaluation.

use std::path::Path;

use serde_json::json;

use crate::checkpoint::{Checkpoint, DType};
use crate::codebook::{embedding_stats, sparsity_from_nnz, sparsity_stats, EmbeddingStats, SparseCodebook, SparsityStats};
use crate::csr::{read_csr, write_csr};
use crate::eval::ModelSnapshot;
use crate::manifest::{ExperimentManifest, ExportFiles};
use crate::scorer::Scorer;
use crate::train::{FullModel, SparseModel};
use crate::{Error, Result};

pub const P_FILE: &str = "p.csr";
pub const Q_FILE: &str = "q.csr";
pub const TABLE_FILE: &str = "table.csr";
pub const SCORER_FILE: &str = "scorer.bin";

fn save_scorer(path: &Path, scorer: &Scorer) -> Result<()> {
    let mut ck = Checkpoint::new(json!({}));
    ck.push_scorer("scorer", scorer, DType::F32);
    ck.save(path)
}

fn load_scorer(path: &Path) -> Result<Scorer> {
    Checkpoint::load(path)?.scorer("scorer")
}

/// Writes `p.csr`, `q.csr` and `scorer.bin` under `dir`.
pub fn export_codebooks(dir: &Path, model: &SparseModel) -> Result<ExportFiles> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csr(&dir.join(P_FILE), &model.p)?;
    write_csr(&dir.join(Q_FILE), &model.q)?;
    save_scorer(&dir.join(SCORER_FILE), &model.scorer)?;
    Ok(ExportFiles::Codebooks {
        p: P_FILE.into(),
        q: Q_FILE.into(),
        scorer: SCORER_FILE.into(),
    })
}

/// Writes `table.csr` and `scorer.bin` under `dir`.
pub fn export_table(dir: &Path, model: &FullModel) -> Result<ExportFiles> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csr(&dir.join(TABLE_FILE), &SparseCodebook::from_dense(model.table.clone()))?;
    save_scorer(&dir.join(SCORER_FILE), &model.scorer)?;
    Ok(ExportFiles::Table {
        table: TABLE_FILE.into(),
        scorer: SCORER_FILE.into(),
    })
}

/// A model read back from an export directory.
pub struct LoadedModel {
    pub snapshot: ModelSnapshot,
    pub sparsity: SparsityStats,
    /// Present for codebook exports.
    pub embedding: Option<EmbeddingStats>,
}

/// Loads the artifacts named by `manifest`, relative to `dir`.
pub fn load_export(dir: &Path, manifest: &ExperimentManifest) -> Result<LoadedModel> {
    let files = manifest
        .export
        .as_ref()
        .ok_or_else(|| Error::Format("manifest lists no exported files".into()))?;
    let n = manifest.num_users + manifest.num_items;
    let full_dim = manifest.config.dim;
    match files {
        ExportFiles::Codebooks { p, q, scorer } => {
            let spec = manifest
                .hash_spec
                .ok_or_else(|| Error::Format("codebook export without a hash spec".into()))?;
            let sp = read_csr(&dir.join(p))?;
            let sq = read_csr(&dir.join(q))?;
            let scorer = load_scorer(&dir.join(scorer))?;
            let snapshot = ModelSnapshot::from_codebooks(&sp, &sq, &spec, manifest.num_users, manifest.num_items, scorer)?;
            Ok(LoadedModel {
                snapshot,
                sparsity: sparsity_stats(&sp, &sq, n, full_dim),
                embedding: Some(embedding_stats(&sp, &sq, &spec)),
            })
        }
        ExportFiles::Table { table, scorer } => {
            let table = read_csr(&dir.join(table))?;
            if table.buckets() != n {
                return Err(Error::Shape(format!("table has {} rows, manifest {n} entities", table.buckets())));
            }
            let scorer = load_scorer(&dir.join(scorer))?;
            let nnz = table.nnz();
            Ok(LoadedModel {
                snapshot: ModelSnapshot::from_full_table(table.values(), manifest.num_users, scorer)?,
                sparsity: sparsity_from_nnz(nnz, n, full_dim),
                embedding: None,
            })
        }
    }
}

pub const PRUNE_CHECKPOINT: &str = "prune";
pub const RETRAIN_CHECKPOINT: &str = "retrain";
pub const UD_CHECKPOINT: &str = "ud";

fn base_meta(kind: &str, num_users: usize, num_items: usize, full_dim: usize) -> serde_json::Value {
    json!({
        "kind": kind,
        "num_users": num_users,
        "num_items": num_items,
        "full_dim": full_dim,
    })
}

/// Codebooks, thresholds, scorer and optimizer state after pruning.
pub fn prune_checkpoint(model: &crate::train::CerpModel, adam: &crate::optim::AdamState, epochs: usize) -> Checkpoint {
    let mut meta = base_meta(PRUNE_CHECKPOINT, model.num_users, model.num_items, model.p.dim());
    meta["bucket_size"] = json!(model.spec.bucket_size());
    meta["epochs"] = json!(epochs);
    let mut ck = Checkpoint::new(meta);
    ck.push_codebook("p", &model.p);
    ck.push_codebook("q", &model.q);
    ck.push_scorer("scorer", &model.scorer, DType::F64);
    ck.push_adam("adam", adam);
    ck
}

/// Retrained codebooks with their masks, scorer and optimizer state.
pub fn retrain_checkpoint(outcome: &crate::train::RetrainOutcome) -> Checkpoint {
    let m = &outcome.model;
    let mut meta = base_meta(RETRAIN_CHECKPOINT, m.num_users, m.num_items, m.dim());
    meta["bucket_size"] = json!(m.spec.bucket_size());
    let mut ck = Checkpoint::new(meta);
    ck.push("p.values", DType::F64, m.p.values().clone());
    ck.push("q.values", DType::F64, m.q.values().clone());
    ck.push_mask("p.mask", &outcome.masks.0);
    ck.push_mask("q.mask", &outcome.masks.1);
    ck.push_scorer("scorer", &m.scorer, DType::F64);
    ck.push_adam("adam", &outcome.adam);
    ck
}

pub fn ud_checkpoint(outcome: &crate::train::UdOutcome, full_dim: usize) -> Checkpoint {
    let m = &outcome.model;
    let mut ck = Checkpoint::new(base_meta(UD_CHECKPOINT, m.num_users, m.table.rows() - m.num_users, full_dim));
    ck.push("table", DType::F64, m.table.clone());
    ck.push_scorer("scorer", &m.scorer, DType::F64);
    ck.push_adam("adam", &outcome.adam);
    ck
}

/// Rebuilds an evaluable model from any checkpoint written above.
pub fn load_checkpoint_model(ck: &Checkpoint) -> Result<LoadedModel> {
    let field = |k: &str| {
        ck.meta
            .get(k)
            .and_then(serde_json::Value::as_u64)
            .map(|v| v as usize)
            .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks {k}")))
    };
    let kind = ck.meta.get("kind").and_then(serde_json::Value::as_str).unwrap_or_default();
    let (num_users, num_items, full_dim) = (field("num_users")?, field("num_items")?, field("full_dim")?);
    let n = num_users + num_items;
    let scorer = ck.scorer("scorer")?;
    let (sp, sq) = match kind {
        PRUNE_CHECKPOINT => (
            crate::codebook::prune_view(&ck.codebook("p")?),
            crate::codebook::prune_view(&ck.codebook("q")?),
        ),
        RETRAIN_CHECKPOINT => (
            SparseCodebook::from_dense(ck.get("p.values")?.clone()),
            SparseCodebook::from_dense(ck.get("q.values")?.clone()),
        ),
        UD_CHECKPOINT => {
            let table = ck.get("table")?;
            return Ok(LoadedModel {
                snapshot: ModelSnapshot::from_full_table(table, num_users, scorer)?,
                sparsity: sparsity_from_nnz(table.count_nonzero(), n, full_dim),
                embedding: None,
            });
        }
        other => {
            return Err(Error::UnknownName {
                kind: "checkpoint kind",
                name: other.into(),
            })
        }
    };
    let spec = crate::hashing::HashSpec::new(n, field("bucket_size")?)?;
    Ok(LoadedModel {
        snapshot: ModelSnapshot::from_codebooks(&sp, &sq, &spec, num_users, num_items, scorer)?,
        sparsity: sparsity_stats(&sp, &sq, n, full_dim),
        embedding: Some(embedding_stats(&sp, &sq, &spec)),
    })
}
