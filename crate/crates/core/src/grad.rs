//! Backward pass from the joint loss into codebook values, soft thresholds
//! and scorer parameters.
//!
//! The prune operator's subgradients are taken elementwise: for a kept
//! entry (pruned value ≠ 0) the value receives the upstream gradient `g`
//! and the threshold receives `−σ'(s) · g · sign(v)`; pruned entries,
//! including those exactly at `|v| = σ(s)`, receive nothing.

use std::collections::HashMap;

use crate::codebook::{prune_scalar, sigmoid_grad, Codebook};
use crate::data::BprTriplet;
use crate::hashing::HashSpec;
use crate::loss::{bpr_loss, gamma_at_epoch, prune_regularizer_entry, total_loss, LossConfig};
use crate::scorer::{dot, Scorer, ScorerGrads};
use crate::table::Table;
use crate::{Error, Result};

/// Per-batch gradient of one codebook. Rows outside `touched_rows` are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookGrads {
    pub d_values: Table,
    pub d_thresholds: Table,
    touched: Vec<bool>,
    touched_rows: Vec<usize>,
}

impl CodebookGrads {
    pub fn new(buckets: usize, dim: usize) -> Self {
        Self {
            d_values: Table::zeros(buckets, dim),
            d_thresholds: Table::zeros(buckets, dim),
            touched: vec![false; buckets],
            touched_rows: Vec::new(),
        }
    }

    pub fn for_codebook(cb: &Codebook) -> Self {
        Self::new(cb.buckets(), cb.dim())
    }

    /// Rows in order of first touch.
    pub fn touched_rows(&self) -> &[usize] {
        &self.touched_rows
    }

    pub fn touch(&mut self, row: usize) {
        if !self.touched[row] {
            self.touched[row] = true;
            self.touched_rows.push(row);
        }
    }

    /// Zeroes the touched rows and forgets them.
    pub fn clear(&mut self) {
        for &r in &self.touched_rows {
            self.d_values.row_mut(r).fill(0.0);
            self.d_thresholds.row_mut(r).fill(0.0);
            self.touched[r] = false;
        }
        self.touched_rows.clear();
    }

    pub fn add_assign(&mut self, other: &CodebookGrads) {
        for &r in other.touched_rows() {
            self.touch(r);
            for (x, y) in self.d_values.row_mut(r).iter_mut().zip(other.d_values.row(r)) {
                *x += y;
            }
            for (x, y) in self.d_thresholds.row_mut(r).iter_mut().zip(other.d_thresholds.row(r)) {
                *x += y;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.d_values.all_finite() && self.d_thresholds.all_finite()
    }
}

/// Adds the prune-operator subgradients for upstream `g = ∂L/∂p̂[row]`.
pub fn accumulate_prune_subgrads(
    cb: &Codebook,
    row: usize,
    g: &[f64],
    grads: &mut CodebookGrads,
) -> Result<()> {
    if g.len() != cb.dim() || grads.d_values.shape() != cb.values.shape() || row >= cb.buckets() {
        return Err(Error::Shape(format!(
            "upstream width {} / grads {:?} / row {row} for codebook {:?}",
            g.len(),
            grads.d_values.shape(),
            cb.values.shape()
        )));
    }
    grads.touch(row);
    let values = cb.values.row(row);
    let thresholds = cb.thresholds.row(row);
    let dv = grads.d_values.row_mut(row);
    for j in 0..g.len() {
        if g[j] != 0.0 && prune_scalar(values[j], thresholds[j]) != 0.0 {
            dv[j] += g[j];
        }
    }
    let ds = grads.d_thresholds.row_mut(row);
    for j in 0..g.len() {
        if g[j] != 0.0 && prune_scalar(values[j], thresholds[j]) != 0.0 {
            ds[j] -= sigmoid_grad(thresholds[j]) * g[j] * values[j].signum();
        }
    }
    Ok(())
}

/// Distinct entities of a batch, users first at `[0, |U|)` and items
/// offset by `|U|`, in order of first appearance.
#[derive(Debug, Clone, Default)]
pub struct BatchEntities {
    pub entities: Vec<usize>,
    /// `[user, pos, neg]` slot of every triplet into `entities`.
    pub slots: Vec<[usize; 3]>,
}

pub fn collect_entities(triplets: &[BprTriplet], num_users: usize) -> BatchEntities {
    let mut index: HashMap<usize, usize> = HashMap::with_capacity(triplets.len() * 2);
    let mut entities = Vec::new();
    let mut slot_of = |k: usize| -> usize {
        *index.entry(k).or_insert_with(|| {
            entities.push(k);
            entities.len() - 1
        })
    };
    let slots = triplets
        .iter()
        .map(|t| {
            [
                slot_of(t.user),
                slot_of(num_users + t.pos_item),
                slot_of(num_users + t.neg_item),
            ]
        })
        .collect();
    BatchEntities { entities, slots }
}

/// BPR sum over a batch with `∂L_BPR/∂e` per batch entity.
#[derive(Debug, Clone)]
pub struct BprPass {
    pub bpr_sum: f64,
    pub d_embed: Vec<Vec<f64>>,
    pub scorer: ScorerGrads,
}

/// Forward and backward of the BPR loss given the batch embeddings
/// (indexed like `batch.entities`). Triplets are reduced in order.
pub fn bpr_pass(batch: &BatchEntities, embeddings: &[Vec<f64>], scorer: &Scorer) -> Result<BprPass> {
    let dim = embeddings.first().map_or(0, Vec::len);
    let mut d_embed = vec![vec![0.0; dim]; embeddings.len()];
    let mut grads = ScorerGrads::zeros_like(scorer);
    let mut bpr_sum = 0.0;
    for &[u, p, n] in &batch.slots {
        let (eu, ep, en) = (&embeddings[u], &embeddings[p], &embeddings[n]);
        match scorer {
            Scorer::Dot => {
                let term = bpr_loss(dot(eu, ep), dot(eu, en));
                bpr_sum += term.loss;
                for j in 0..dim {
                    d_embed[u][j] += term.d_pos * ep[j] + term.d_neg * en[j];
                }
                for j in 0..dim {
                    d_embed[p][j] += term.d_pos * eu[j];
                }
                for j in 0..dim {
                    d_embed[n][j] += term.d_neg * eu[j];
                }
            }
            Scorer::Mlp(_) => {
                let (y_pos, cache_pos) = scorer.score(eu, ep)?;
                let (y_neg, cache_neg) = scorer.score(eu, en)?;
                let term = bpr_loss(y_pos, y_neg);
                bpr_sum += term.loss;
                let mut du = vec![0.0; dim];
                let mut di = vec![0.0; dim];
                scorer.accumulate_backward(&cache_pos, term.d_pos, &mut du, &mut di, &mut grads)?;
                add_into(&mut d_embed[p], &di);
                di.fill(0.0);
                scorer.accumulate_backward(&cache_neg, term.d_neg, &mut du, &mut di, &mut grads)?;
                add_into(&mut d_embed[n], &di);
                add_into(&mut d_embed[u], &du);
            }
        }
    }
    Ok(BprPass {
        bpr_sum,
        d_embed,
        scorer: grads,
    })
}

#[inline]
fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// Loss components of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchLoss {
    pub bpr: f64,
    pub prune: f64,
    pub gamma: f64,
    pub total: f64,
    pub triplets: usize,
}

/// Gradients of the joint loss for one batch.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub p: CodebookGrads,
    pub q: CodebookGrads,
    pub scorer: ScorerGrads,
    pub loss: BatchLoss,
}

impl BatchGradients {
    pub fn new(p: &Codebook, q: &Codebook, scorer: &Scorer) -> Self {
        Self {
            p: CodebookGrads::for_codebook(p),
            q: CodebookGrads::for_codebook(q),
            scorer: ScorerGrads::zeros_like(scorer),
            loss: BatchLoss::default(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.p.all_finite() && self.q.all_finite() && self.scorer.all_finite() && self.loss.total.is_finite()
    }
}

/// The parameters seen by the pruning-phase backward pass.
#[derive(Debug, Clone, Copy)]
pub struct PruneParams<'a> {
    pub spec: &'a HashSpec,
    pub num_users: usize,
    pub p: &'a Codebook,
    pub q: &'a Codebook,
    pub scorer: &'a Scorer,
}

/// Joint-loss gradients `L_BPR + γ_t · L_prune` for one batch, with
/// embeddings composed from the pruned codebooks.
pub fn batch_backward(
    triplets: &[BprTriplet],
    params: PruneParams<'_>,
    loss_cfg: &LossConfig,
    epoch: usize,
) -> Result<BatchGradients> {
    let mut out = BatchGradients::new(params.p, params.q, params.scorer);
    batch_backward_into(triplets, params, loss_cfg, epoch, &mut out)?;
    Ok(out)
}

/// As [`batch_backward`], reusing `out` (cleared first).
pub fn batch_backward_into(
    triplets: &[BprTriplet],
    params: PruneParams<'_>,
    loss_cfg: &LossConfig,
    epoch: usize,
    out: &mut BatchGradients,
) -> Result<()> {
    let PruneParams {
        spec,
        num_users,
        p,
        q,
        scorer,
    } = params;
    out.p.clear();
    out.q.clear();
    let dim = p.dim();
    let batch = collect_entities(triplets, num_users);

    // pruned rows, computed once per distinct row
    let mut p_slot = vec![usize::MAX; p.buckets()];
    let mut q_slot = vec![usize::MAX; q.buckets()];
    let (mut p_rows, mut p_hat) = (Vec::new(), Vec::new());
    let (mut q_rows, mut q_hat) = (Vec::new(), Vec::new());
    let mut embeddings = Vec::with_capacity(batch.entities.len());
    let mut entity_rows = Vec::with_capacity(batch.entities.len());
    for &k in &batch.entities {
        let idx = spec.hash(k)?;
        if p_slot[idx.p] == usize::MAX {
            p_slot[idx.p] = p_rows.len();
            p_rows.push(idx.p);
            let mut row = vec![0.0; dim];
            p.pruned_row(idx.p, &mut row);
            p_hat.push(row);
        }
        if q_slot[idx.q] == usize::MAX {
            q_slot[idx.q] = q_rows.len();
            q_rows.push(idx.q);
            let mut row = vec![0.0; dim];
            q.pruned_row(idx.q, &mut row);
            q_hat.push(row);
        }
        let (ps, qs) = (p_slot[idx.p], q_slot[idx.q]);
        embeddings.push(p_hat[ps].iter().zip(&q_hat[qs]).map(|(a, b)| a + b).collect::<Vec<f64>>());
        entity_rows.push((ps, qs));
    }

    let BprPass {
        bpr_sum,
        mut d_embed,
        scorer: scorer_grads,
    } = bpr_pass(&batch, &embeddings, scorer)?;

    let gamma = gamma_at_epoch(loss_cfg, epoch);
    let mut prune = 0.0;
    if gamma != 0.0 {
        for (e, de) in embeddings.iter().zip(d_embed.iter_mut()) {
            for (x, g) in e.iter().zip(de.iter_mut()) {
                let (v, dv) = prune_regularizer_entry(*x, loss_cfg.eta);
                prune += v;
                *g += gamma * dv;
            }
        }
    }

    // ∂e/∂p̂ = ∂e/∂q̂ = I: sum entity gradients per codebook row
    let mut gp = vec![vec![0.0; dim]; p_rows.len()];
    let mut gq = vec![vec![0.0; dim]; q_rows.len()];
    for (de, &(ps, qs)) in d_embed.iter().zip(&entity_rows) {
        add_into(&mut gp[ps], de);
        add_into(&mut gq[qs], de);
    }
    for (row, g) in p_rows.iter().zip(&gp) {
        accumulate_prune_subgrads(p, *row, g, &mut out.p)?;
    }
    for (row, g) in q_rows.iter().zip(&gq) {
        accumulate_prune_subgrads(q, *row, g, &mut out.q)?;
    }
    out.scorer = scorer_grads;
    out.loss = BatchLoss {
        bpr: bpr_sum,
        prune,
        gamma,
        total: total_loss(bpr_sum, gamma, prune),
        triplets: triplets.len(),
    };
    Ok(())
}
