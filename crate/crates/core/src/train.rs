//! The two training phases, the uniform-dimension baseline and the
//! per-epoch report.
//!
//! Pruning optimizes `L_BPR + γ_t · L_prune` over codebook values, soft
//! thresholds and scorer parameters until the pruned fraction measured at
//! the end of an epoch reaches the target, or the epoch cap is hit (a
//! stall). γ is halved after every pruning epoch when decay is on.
//! Retraining freezes the supports found by pruning and optimizes
//! `L_BPR` alone, forcing masked entries back to zero after every step and
//! keeping the epoch with the best validation NDCG.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codebook::{
    embedding_stats, extract_masks, init_codebook, prune_view, sparsity_from_nnz, sparsity_stats,
    xavier_uniform, Codebook, EmbeddingStats, PruneMask, SparseCodebook, SparsityStats,
    ThresholdScheme,
};
use crate::data::{epoch_triplets, BprTriplet, InteractionDataset, Partition};
use crate::eval::{evaluate, ModelSnapshot, DEFAULT_TOPN};
use crate::grad::{batch_backward_into, bpr_pass, collect_entities, BatchGradients, CodebookGrads, PruneParams};
use crate::hashing::HashSpec;
use crate::loss::LossConfig;
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{self, Rng, Stream};
use crate::scorer::{default_hidden, Scorer, ScorerKind};
use crate::table::Table;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Cerp,
    Ud,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cerp" => Ok(Mode::Cerp),
            "ud" => Ok(Mode::Ud),
            _ => Err(Error::UnknownName { kind: "mode", name: s.into() }),
        }
    }
}

/// How retraining starts from the pruned model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RetrainMode {
    /// Keep the pruned values and the scorer as trained.
    Continue,
    /// Re-draw codebooks and scorer from the run seed, then apply the masks.
    Rewind,
}

impl FromStr for RetrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "continue" => Ok(RetrainMode::Continue),
            "rewind" => Ok(RetrainMode::Rewind),
            _ => Err(Error::UnknownName { kind: "retrain mode", name: s.into() }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Full embedding width `d`.
    pub dim: usize,
    /// Rows per codebook `b`.
    pub bucket_size: usize,
    /// Target pruned fraction `s` of the full `N × d` budget.
    pub target_sparsity: f64,
    pub loss: LossConfig,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub negatives: usize,
    /// Sample negatives once and reuse them every epoch.
    pub freeze_negatives: bool,
    pub max_prune_epochs: usize,
    pub retrain_epochs: usize,
    /// Retraining stops after this many epochs without a validation gain.
    pub patience: usize,
    pub seed: u64,
    pub threshold_init: ThresholdScheme,
    /// Added to every initial soft threshold.
    pub threshold_offset: f64,
    pub retrain_mode: RetrainMode,
    pub scorer: ScorerKind,
    /// MLP hidden widths; `2d, d, d/2` when unset.
    pub mlp_hidden: Option<Vec<usize>>,
    pub topn: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Cerp,
            dim: 128,
            bucket_size: 0,
            target_sparsity: 0.9,
            loss: LossConfig::default(),
            learning_rate: 1e-2,
            weight_decay: 1e-5,
            batch_size: 1024,
            negatives: 5,
            freeze_negatives: false,
            max_prune_epochs: 50,
            retrain_epochs: 50,
            patience: 10,
            seed: 2024,
            threshold_init: ThresholdScheme::AllOnes,
            threshold_offset: -5.0,
            retrain_mode: RetrainMode::Continue,
            scorer: ScorerKind::Dot,
            mlp_hidden: None,
            topn: DEFAULT_TOPN,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.target_sparsity) {
            return fail(format!("target sparsity {} outside [0, 1)", self.target_sparsity));
        }
        if self.dim == 0 || self.batch_size == 0 || self.negatives == 0 || self.topn == 0 {
            return fail("dim, batch_size, negatives and topn must be positive".into());
        }
        if self.max_prune_epochs == 0 {
            return fail("max_prune_epochs must be at least 1".into());
        }
        if self.patience == 0 {
            return fail("patience must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight decay {} must be non-negative", self.weight_decay));
        }
        if !self.threshold_offset.is_finite() {
            return fail("threshold offset must be finite".into());
        }
        if let Some(h) = &self.mlp_hidden {
            if h.is_empty() || h.contains(&0) {
                return fail(format!("bad MLP hidden widths {h:?}"));
            }
        }
        if self.mode == Mode::Cerp && self.bucket_size == 0 {
            return fail("bucket_size is required in cerp mode".into());
        }
        self.loss.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }

    pub fn hidden_for(&self, dim: usize) -> Vec<usize> {
        self.mlp_hidden.clone().unwrap_or_else(|| default_hidden(dim))
    }

    /// Width of the uniform-dimension baseline, `⌊(1 − s) · d⌋`.
    pub fn ud_dim(&self) -> Result<usize> {
        let d = ((1.0 - self.target_sparsity) * self.dim as f64 + 1e-9).floor() as usize;
        if d == 0 {
            return Err(Error::Config(format!(
                "sparsity {} leaves no dimension of {} for the uniform baseline",
                self.target_sparsity, self.dim
            )));
        }
        Ok(d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Prune,
    Retrain,
    Ud,
    Final,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Prune => "prune",
            Phase::Retrain => "retrain",
            Phase::Ud => "ud",
            Phase::Final => "final",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub phase: Phase,
    /// Mean total loss per triplet.
    pub loss: f64,
    pub gamma: f64,
    pub kept_ratio: f64,
    pub avg_dim: f64,
    pub overlap_rate: f64,
    pub val_ndcg: Option<f64>,
    pub val_recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub rows: Vec<LogRow>,
    /// Pruned fraction at the end of the phase.
    pub pruned_fraction: f64,
    /// The pruning phase hit the epoch cap before the target.
    pub stalled: bool,
}

pub const CSV_HEADER: &str = "epoch,phase,loss,gamma,kept_ratio,avg_dim,overlap_rate,val_ndcg,val_recall";

impl TrainReport {
    pub fn extend(&mut self, other: &TrainReport) {
        self.rows.extend_from_slice(&other.rows);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.epoch,
                r.phase.name(),
                r.loss,
                r.gamma,
                r.kept_ratio,
                r.avg_dim,
                r.overlap_rate,
                opt(r.val_ndcg),
                opt(r.val_recall)
            );
        }
        out
    }

    pub fn last(&self, phase: Phase) -> Option<&LogRow> {
        self.rows.iter().rev().find(|r| r.phase == phase)
    }
}

/// Codebooks with soft thresholds and the scorer, as optimized while
/// pruning.
#[derive(Debug, Clone, PartialEq)]
pub struct CerpModel {
    pub spec: HashSpec,
    pub num_users: usize,
    pub num_items: usize,
    pub p: Codebook,
    pub q: Codebook,
    pub scorer: Scorer,
}

impl CerpModel {
    /// Draws codebooks and scorer from the seed streams of `cfg.seed`.
    pub fn init(num_users: usize, num_items: usize, cfg: &TrainConfig) -> Result<Self> {
        let spec = HashSpec::new(num_users + num_items, cfg.bucket_size)?;
        let b = spec.bucket_size();
        let p = init_codebook(
            b,
            cfg.dim,
            &mut rng::stream(cfg.seed, Stream::CodebookP),
            cfg.threshold_init,
            cfg.threshold_offset,
        )?;
        let q = init_codebook(
            b,
            cfg.dim,
            &mut rng::stream(cfg.seed, Stream::CodebookQ),
            cfg.threshold_init,
            cfg.threshold_offset,
        )?;
        let scorer = Scorer::new(
            cfg.scorer,
            cfg.dim,
            &cfg.hidden_for(cfg.dim),
            &mut rng::stream(cfg.seed, Stream::Scorer),
        )?;
        Ok(Self {
            spec,
            num_users,
            num_items,
            p,
            q,
            scorer,
        })
    }

    pub fn params(&self) -> PruneParams<'_> {
        PruneParams {
            spec: &self.spec,
            num_users: self.num_users,
            p: &self.p,
            q: &self.q,
            scorer: &self.scorer,
        }
    }

    pub fn pruned(&self) -> SparseModel {
        SparseModel {
            spec: self.spec,
            num_users: self.num_users,
            num_items: self.num_items,
            p: prune_view(&self.p),
            q: prune_view(&self.q),
            scorer: self.scorer.clone(),
        }
    }

    fn all_finite(&self) -> bool {
        self.p.values.all_finite()
            && self.p.thresholds.all_finite()
            && self.q.values.all_finite()
            && self.q.thresholds.all_finite()
            && self.scorer.all_finite()
    }
}

/// Two pruned codebooks plus scorer: the deployable model.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseModel {
    pub spec: HashSpec,
    pub num_users: usize,
    pub num_items: usize,
    pub p: SparseCodebook,
    pub q: SparseCodebook,
    pub scorer: Scorer,
}

impl SparseModel {
    pub fn dim(&self) -> usize {
        self.p.dim()
    }

    pub fn snapshot(&self) -> Result<ModelSnapshot> {
        ModelSnapshot::from_codebooks(
            &self.p,
            &self.q,
            &self.spec,
            self.num_users,
            self.num_items,
            self.scorer.clone(),
        )
    }

    pub fn sparsity(&self) -> SparsityStats {
        sparsity_stats(&self.p, &self.q, self.spec.num_entities(), self.dim())
    }

    pub fn embedding_stats(&self) -> EmbeddingStats {
        embedding_stats(&self.p, &self.q, &self.spec)
    }

    pub fn masks(&self) -> (PruneMask, PruneMask) {
        extract_masks(&self.p, &self.q)
    }

    /// Single-precision copy, as written by the exporter.
    pub fn round_to_f32(&self) -> Self {
        Self {
            p: self.p.round_to_f32(),
            q: self.q.round_to_f32(),
            scorer: self.scorer.round_to_f32(),
            ..self.clone()
        }
    }
}

/// Full `(|U| + |I|) × d'` table with a scorer: the uniform baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct FullModel {
    pub num_users: usize,
    pub table: Table,
    pub scorer: Scorer,
}

impl FullModel {
    pub fn snapshot(&self) -> Result<ModelSnapshot> {
        ModelSnapshot::from_full_table(&self.table, self.num_users, self.scorer.clone())
    }

    pub fn round_to_f32(&self) -> Self {
        Self {
            num_users: self.num_users,
            table: self.table.map(|x| x as f32 as f64),
            scorer: self.scorer.round_to_f32(),
        }
    }
}

/// Per-epoch triplets: fresh negatives every epoch (or a frozen first
/// draw), shuffled on a separate stream.
struct TripletSource {
    sampler: Rng,
    shuffler: Rng,
    frozen: Option<Vec<BprTriplet>>,
    negatives: usize,
    freeze: bool,
}

impl TripletSource {
    fn new(cfg: &TrainConfig, salt: u64) -> Self {
        Self {
            sampler: rng::stream(cfg.seed ^ salt, Stream::Sampler),
            shuffler: rng::stream(cfg.seed ^ salt, Stream::Shuffle),
            frozen: None,
            negatives: cfg.negatives,
            freeze: cfg.freeze_negatives,
        }
    }

    fn next_epoch(&mut self, dataset: &InteractionDataset) -> Result<Vec<BprTriplet>> {
        let mut triplets = match (&self.frozen, self.freeze) {
            (Some(t), true) => t.clone(),
            _ => {
                let t = epoch_triplets(dataset, self.negatives, &mut self.sampler)?;
                if self.freeze {
                    self.frozen = Some(t.clone());
                }
                t
            }
        };
        if triplets.is_empty() {
            return Err(Error::Degenerate("train partition is empty".into()));
        }
        rng::shuffle(&mut self.shuffler, &mut triplets);
        Ok(triplets)
    }
}

// Salts keep phases on distinct sampling streams.
const PRUNE_SALT: u64 = 0;
const RETRAIN_SALT: u64 = 0x5245_5452_4149_4e00;
const UD_SALT: u64 = 0x5544_0000_0000_0000;

fn validation_metrics(
    snapshot: &ModelSnapshot,
    dataset: &InteractionDataset,
    topn: usize,
) -> Result<(Option<f64>, Option<f64>)> {
    if dataset.validation.is_empty() {
        return Ok((None, None));
    }
    let r = evaluate(snapshot, dataset, Partition::Validation, topn)?;
    Ok((Some(r.ndcg), Some(r.recall)))
}

pub struct PruneOutcome {
    pub model: CerpModel,
    pub adam: AdamState,
    pub report: TrainReport,
}

fn scorer_param_sizes(scorer: &Scorer) -> Vec<usize> {
    scorer.params().iter().map(|p| p.len()).collect()
}

fn step_scorer(scorer: &mut Scorer, grads: &crate::scorer::ScorerGrads, adam: &mut AdamState, first_slot: usize, cfg: &AdamConfig) {
    if grads.layers.is_empty() {
        return;
    }
    let flat = grads.flat();
    for (k, param) in scorer.params_mut().into_iter().enumerate() {
        adam.update_dense(first_slot + k, param, flat[k], cfg);
    }
}

pub fn prune_phase(dataset: &InteractionDataset, cfg: &TrainConfig) -> Result<PruneOutcome> {
    cfg.validate()?;
    let model = CerpModel::init(dataset.num_users, dataset.num_items, cfg)?;
    prune_from(model, dataset, cfg)
}

/// Runs the pruning phase starting from `model`.
pub fn prune_from(mut model: CerpModel, dataset: &InteractionDataset, cfg: &TrainConfig) -> Result<PruneOutcome> {
    cfg.validate()?;
    let adam_cfg = cfg.adam();
    let table = model.p.values.as_slice().len();
    let mut sizes = vec![table; 4];
    sizes.extend(scorer_param_sizes(&model.scorer));
    let mut adam = AdamState::new(sizes);
    let mut source = TripletSource::new(cfg, PRUNE_SALT);
    let mut grads = BatchGradients::new(&model.p, &model.q, &model.scorer);
    let mut report = TrainReport::default();

    for epoch in 0..cfg.max_prune_epochs {
        let triplets = source.next_epoch(dataset)?;
        let mut loss_sum = 0.0;
        let mut gamma = 0.0;
        for batch in triplets.chunks(cfg.batch_size) {
            batch_backward_into(batch, model.params(), &cfg.loss, epoch, &mut grads)?;
            if !grads.all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("non-finite loss or gradient (batch loss {})", grads.loss.total),
                });
            }
            loss_sum += grads.loss.total;
            gamma = grads.loss.gamma;
            adam.begin_step();
            let (pr, qr) = (grads.p.touched_rows().to_vec(), grads.q.touched_rows().to_vec());
            adam.update_rows(0, &mut model.p.values, &grads.p.d_values, &pr, &adam_cfg);
            adam.update_rows(1, &mut model.p.thresholds, &grads.p.d_thresholds, &pr, &adam_cfg);
            adam.update_rows(2, &mut model.q.values, &grads.q.d_values, &qr, &adam_cfg);
            adam.update_rows(3, &mut model.q.thresholds, &grads.q.d_thresholds, &qr, &adam_cfg);
            step_scorer(&mut model.scorer, &grads.scorer, &mut adam, 4, &adam_cfg);
        }
        if !model.all_finite() {
            return Err(Error::Diverged { epoch, detail: "non-finite parameters".into() });
        }
        let sparse = model.pruned();
        let sparsity = sparse.sparsity();
        let stats = sparse.embedding_stats();
        let (val_ndcg, val_recall) = validation_metrics(&sparse.snapshot()?, dataset, cfg.topn)?;
        let row = LogRow {
            epoch,
            phase: Phase::Prune,
            loss: loss_sum / triplets.len() as f64,
            gamma,
            kept_ratio: sparsity.kept_ratio,
            avg_dim: stats.avg_dim,
            overlap_rate: stats.overlap_rate,
            val_ndcg,
            val_recall,
        };
        log::info!(
            "prune epoch {epoch}: loss {:.5} γ {:.3e} pruned {:.4} avg dim {:.2} overlap {:.4} val ndcg {:?}",
            row.loss, gamma, sparsity.pruned_fraction, stats.avg_dim, stats.overlap_rate, val_ndcg
        );
        report.rows.push(row);
        report.pruned_fraction = sparsity.pruned_fraction;
        if sparsity.pruned_fraction >= cfg.target_sparsity {
            return Ok(PruneOutcome { model, adam, report });
        }
    }
    report.stalled = true;
    log::warn!(
        "pruning stalled at {:.4} after {} epochs (target {})",
        report.pruned_fraction,
        cfg.max_prune_epochs,
        cfg.target_sparsity
    );
    Ok(PruneOutcome { model, adam, report })
}

/// A model trained on the BPR loss alone.
trait BprTrainable {
    fn num_users(&self) -> usize;
    fn scorer(&self) -> &Scorer;
    fn embed(&self, entity: usize) -> Vec<f64>;
    /// Applies one Adam step given per-entity embedding gradients.
    fn step(&mut self, entities: &[usize], d_embed: &[Vec<f64>], scorer_grads: &crate::scorer::ScorerGrads, adam: &mut AdamState, cfg: &AdamConfig);
}

struct MaskedCodebooks {
    spec: HashSpec,
    num_users: usize,
    num_items: usize,
    p: Table,
    q: Table,
    mask_p: PruneMask,
    mask_q: PruneMask,
    scorer: Scorer,
    gp: CodebookGrads,
    gq: CodebookGrads,
}

impl MaskedCodebooks {
    fn sparse(&self) -> SparseModel {
        SparseModel {
            spec: self.spec,
            num_users: self.num_users,
            num_items: self.num_items,
            p: SparseCodebook::from_dense(self.p.clone()),
            q: SparseCodebook::from_dense(self.q.clone()),
            scorer: self.scorer.clone(),
        }
    }
}

fn route_masked(rows_grads: &mut CodebookGrads, row: usize, g: &[f64], mask: &PruneMask) {
    rows_grads.touch(row);
    let m = mask.row(row);
    for ((acc, &x), &keep) in rows_grads.d_values.row_mut(row).iter_mut().zip(g).zip(m) {
        if keep {
            *acc += x;
        }
    }
}

impl BprTrainable for MaskedCodebooks {
    fn num_users(&self) -> usize {
        self.num_users
    }

    fn scorer(&self) -> &Scorer {
        &self.scorer
    }

    fn embed(&self, entity: usize) -> Vec<f64> {
        let idx = self.spec.index(entity);
        self.p.row(idx.p).iter().zip(self.q.row(idx.q)).map(|(a, b)| a + b).collect()
    }

    fn step(&mut self, entities: &[usize], d_embed: &[Vec<f64>], scorer_grads: &crate::scorer::ScorerGrads, adam: &mut AdamState, cfg: &AdamConfig) {
        self.gp.clear();
        self.gq.clear();
        for (&k, g) in entities.iter().zip(d_embed) {
            let idx = self.spec.index(k);
            route_masked(&mut self.gp, idx.p, g, &self.mask_p);
            route_masked(&mut self.gq, idx.q, g, &self.mask_q);
        }
        adam.begin_step();
        let (pr, qr) = (self.gp.touched_rows().to_vec(), self.gq.touched_rows().to_vec());
        adam.update_rows(0, &mut self.p, &self.gp.d_values, &pr, cfg);
        adam.update_rows(1, &mut self.q, &self.gq.d_values, &qr, cfg);
        for (table, mask, rows) in [(&mut self.p, &self.mask_p, &pr), (&mut self.q, &self.mask_q, &qr)] {
            for &r in rows {
                for (x, &keep) in table.row_mut(r).iter_mut().zip(mask.row(r)) {
                    if !keep {
                        *x = 0.0;
                    }
                }
            }
        }
        step_scorer(&mut self.scorer, scorer_grads, adam, 2, cfg);
    }
}

struct FullTable {
    num_users: usize,
    table: Table,
    scorer: Scorer,
    grads: CodebookGrads,
}

impl BprTrainable for FullTable {
    fn num_users(&self) -> usize {
        self.num_users
    }

    fn scorer(&self) -> &Scorer {
        &self.scorer
    }

    fn embed(&self, entity: usize) -> Vec<f64> {
        self.table.row(entity).to_vec()
    }

    fn step(&mut self, entities: &[usize], d_embed: &[Vec<f64>], scorer_grads: &crate::scorer::ScorerGrads, adam: &mut AdamState, cfg: &AdamConfig) {
        self.grads.clear();
        for (&k, g) in entities.iter().zip(d_embed) {
            self.grads.touch(k);
            self.grads.d_values.row_mut(k).copy_from_slice(g);
        }
        adam.begin_step();
        let rows = self.grads.touched_rows().to_vec();
        adam.update_rows(0, &mut self.table, &self.grads.d_values, &rows, cfg);
        step_scorer(&mut self.scorer, scorer_grads, adam, 1, cfg);
    }
}

/// One epoch of BPR minibatch training; returns the mean loss per triplet.
fn bpr_epoch(model: &mut impl BprTrainable, triplets: &[BprTriplet], cfg: &TrainConfig, adam: &mut AdamState, epoch: usize) -> Result<f64> {
    let adam_cfg = cfg.adam();
    let mut loss_sum = 0.0;
    for batch in triplets.chunks(cfg.batch_size) {
        let entities = collect_entities(batch, model.num_users());
        let embeddings: Vec<Vec<f64>> = entities.entities.iter().map(|&k| model.embed(k)).collect();
        let pass = bpr_pass(&entities, &embeddings, model.scorer())?;
        if !pass.bpr_sum.is_finite() || !pass.scorer.all_finite() {
            return Err(Error::Diverged { epoch, detail: format!("batch loss {}", pass.bpr_sum) });
        }
        loss_sum += pass.bpr_sum;
        model.step(&entities.entities, &pass.d_embed, &pass.scorer, adam, &adam_cfg);
    }
    Ok(loss_sum / triplets.len() as f64)
}

pub struct RetrainOutcome {
    /// Best-on-validation model at full precision.
    pub model: SparseModel,
    /// `model` rounded to single precision; the exported artifact.
    pub deployable: SparseModel,
    pub masks: (PruneMask, PruneMask),
    pub adam: AdamState,
    pub report: TrainReport,
}

/// Retrains the surviving entries of `pruned` under fixed masks.
pub fn retrain_phase(
    pruned: &CerpModel,
    masks: (&PruneMask, &PruneMask),
    dataset: &InteractionDataset,
    cfg: &TrainConfig,
) -> Result<RetrainOutcome> {
    cfg.validate()?;
    let (mask_p, mask_q) = masks;
    if mask_p.shape() != pruned.p.values.shape() || mask_q.shape() != pruned.q.values.shape() {
        return Err(Error::Shape(format!(
            "masks {:?}/{:?} vs codebooks {:?}",
            mask_p.shape(),
            mask_q.shape(),
            pruned.p.values.shape()
        )));
    }
    let (mut p, mut q, scorer) = match cfg.retrain_mode {
        RetrainMode::Continue => {
            let view = pruned.pruned();
            (view.p.into_values(), view.q.into_values(), pruned.scorer.clone())
        }
        RetrainMode::Rewind => {
            let fresh = CerpModel::init(pruned.num_users, pruned.num_items, cfg)?;
            (fresh.p.values, fresh.q.values, fresh.scorer)
        }
    };
    mask_p.apply(&mut p)?;
    mask_q.apply(&mut q)?;
    let (b, d) = p.shape();
    let mut sizes = vec![b * d, b * d];
    sizes.extend(scorer_param_sizes(&scorer));
    let mut adam = AdamState::new(sizes);
    let mut model = MaskedCodebooks {
        spec: pruned.spec,
        num_users: pruned.num_users,
        num_items: pruned.num_items,
        p,
        q,
        mask_p: mask_p.clone(),
        mask_q: mask_q.clone(),
        scorer,
        gp: CodebookGrads::new(b, d),
        gq: CodebookGrads::new(b, d),
    };
    let mut source = TripletSource::new(cfg, RETRAIN_SALT);
    let mut report = TrainReport::default();
    let mut best: Option<(f64, SparseModel)> = None;
    let mut since_best = 0;
    for epoch in 0..cfg.retrain_epochs {
        let triplets = source.next_epoch(dataset)?;
        let loss = bpr_epoch(&mut model, &triplets, cfg, &mut adam, epoch)?;
        let sparse = model.sparse();
        let sparsity = sparse.sparsity();
        let stats = sparse.embedding_stats();
        let (val_ndcg, val_recall) = validation_metrics(&sparse.snapshot()?, dataset, cfg.topn)?;
        log::info!(
            "retrain epoch {epoch}: loss {loss:.5} kept {:.4} val ndcg {val_ndcg:?}",
            sparsity.kept_ratio
        );
        report.rows.push(LogRow {
            epoch,
            phase: Phase::Retrain,
            loss,
            gamma: 0.0,
            kept_ratio: sparsity.kept_ratio,
            avg_dim: stats.avg_dim,
            overlap_rate: stats.overlap_rate,
            val_ndcg,
            val_recall,
        });
        let score = val_ndcg.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, sparse));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let model = match best {
        Some((_, m)) => m,
        None => model.sparse(),
    };
    let deployable = model.round_to_f32();
    let final_row = final_row(&deployable.snapshot()?, deployable.sparsity(), Some(deployable.embedding_stats()), dataset, cfg, report.rows.len())?;
    report.pruned_fraction = final_row.1.pruned_fraction;
    report.rows.push(final_row.0);
    Ok(RetrainOutcome {
        model,
        deployable,
        masks: (mask_p.clone(), mask_q.clone()),
        adam,
        report,
    })
}

fn final_row(
    snapshot: &ModelSnapshot,
    sparsity: SparsityStats,
    stats: Option<EmbeddingStats>,
    dataset: &InteractionDataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(LogRow, SparsityStats)> {
    let (val_ndcg, val_recall) = validation_metrics(snapshot, dataset, cfg.topn)?;
    Ok((
        LogRow {
            epoch,
            phase: Phase::Final,
            loss: f64::NAN,
            gamma: 0.0,
            kept_ratio: sparsity.kept_ratio,
            avg_dim: stats.map_or(snapshot.users.cols() as f64, |s| s.avg_dim),
            overlap_rate: stats.map_or(0.0, |s| s.overlap_rate),
            val_ndcg,
            val_recall,
        },
        sparsity,
    ))
}

pub struct UdOutcome {
    pub model: FullModel,
    pub deployable: FullModel,
    pub dim: usize,
    pub adam: AdamState,
    pub report: TrainReport,
}

/// Trains a full table of width `⌊(1 − s) · d⌋` under the same protocol.
pub fn run_ud_baseline(dataset: &InteractionDataset, cfg: &TrainConfig) -> Result<UdOutcome> {
    let mut cfg = cfg.clone();
    cfg.mode = Mode::Ud;
    cfg.validate()?;
    let d = cfg.ud_dim()?;
    let n = dataset.num_entities();
    let table = xavier_uniform(n, d, &mut rng::stream(cfg.seed, Stream::FullTable));
    let scorer = Scorer::new(cfg.scorer, d, &cfg.hidden_for(d), &mut rng::stream(cfg.seed, Stream::Scorer))?;
    let mut sizes = vec![n * d];
    sizes.extend(scorer_param_sizes(&scorer));
    let mut adam = AdamState::new(sizes);
    let mut model = FullTable {
        num_users: dataset.num_users,
        table,
        scorer,
        grads: CodebookGrads::new(n, d),
    };
    let sparsity = sparsity_from_nnz(n * d, n, cfg.dim);
    let mut source = TripletSource::new(&cfg, UD_SALT);
    let mut report = TrainReport::default();
    let mut best: Option<(f64, FullModel)> = None;
    let mut since_best = 0;
    for epoch in 0..cfg.retrain_epochs {
        let triplets = source.next_epoch(dataset)?;
        let loss = bpr_epoch(&mut model, &triplets, &cfg, &mut adam, epoch)?;
        let full = FullModel {
            num_users: model.num_users,
            table: model.table.clone(),
            scorer: model.scorer.clone(),
        };
        let (val_ndcg, val_recall) = validation_metrics(&full.snapshot()?, dataset, cfg.topn)?;
        log::info!("ud epoch {epoch}: loss {loss:.5} val ndcg {val_ndcg:?}");
        report.rows.push(LogRow {
            epoch,
            phase: Phase::Ud,
            loss,
            gamma: 0.0,
            kept_ratio: sparsity.kept_ratio,
            avg_dim: d as f64,
            overlap_rate: 0.0,
            val_ndcg,
            val_recall,
        });
        let score = val_ndcg.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, full));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let model = match best {
        Some((_, m)) => m,
        None => FullModel {
            num_users: model.num_users,
            table: model.table,
            scorer: model.scorer,
        },
    };
    let deployable = model.round_to_f32();
    let kept = sparsity_from_nnz(deployable.table.count_nonzero(), n, cfg.dim);
    let (row, _) = final_row(&deployable.snapshot()?, kept, None, dataset, &cfg, report.rows.len())?;
    report.pruned_fraction = kept.pruned_fraction;
    report.rows.push(row);
    Ok(UdOutcome {
        model,
        deployable,
        dim: d,
        adam,
        report,
    })
}

/// Pruning followed by retraining.
pub struct CerpRun {
    pub prune: PruneOutcome,
    pub retrain: RetrainOutcome,
    /// Prune rows, retrain rows and the final row.
    pub report: TrainReport,
}

pub fn run_cerp(dataset: &InteractionDataset, cfg: &TrainConfig) -> Result<CerpRun> {
    let prune = prune_phase(dataset, cfg)?;
    let (mask_p, mask_q) = prune.model.pruned().masks();
    let retrain = retrain_phase(&prune.model, (&mask_p, &mask_q), dataset, cfg)?;
    let mut report = prune.report.clone();
    report.extend(&retrain.report);
    report.pruned_fraction = retrain.report.pruned_fraction;
    Ok(CerpRun { prune, retrain, report })
}
