//! Codebooks, the soft-threshold prune operator and the statistics computed
//! over pruned codebooks.

use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::hashing::{EntityIndex, HashSpec};
use crate::rng::{unit_f64, Rng};
use crate::table::Table;
use crate::{Error, Result};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn sigmoid_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

/// `sign(v) · max(|v| − σ(s), 0)`. Exactly zero when `|v| ≤ σ(s)`.
#[inline]
pub fn prune_scalar(value: f64, threshold: f64) -> f64 {
    let margin = value.abs() - sigmoid(threshold);
    if margin > 0.0 {
        margin.copysign(value)
    } else {
        0.0
    }
}

/// Prune one row into `out`.
#[inline]
pub fn prune_row(values: &[f64], thresholds: &[f64], out: &mut [f64]) {
    for ((o, &v), &s) in out.iter_mut().zip(values).zip(thresholds) {
        *o = prune_scalar(v, s);
    }
}

/// Distribution of the initial soft-threshold table, before the offset is
/// added.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdScheme {
    /// Every entry 1.
    AllOnes,
    /// `U[0, 1)`.
    Uniform,
    /// Standard normal.
    Normal,
    /// `|z|³` for standard normal `z`, divided by the table maximum so the
    /// values lie in `[0, 1]` with a heavy right tail.
    LongTail,
    /// `U(−a, a)` with `a = √(6 / (b + d))`.
    XavierUniform,
}

impl ThresholdScheme {
    pub const ALL: [ThresholdScheme; 5] = [
        ThresholdScheme::AllOnes,
        ThresholdScheme::Uniform,
        ThresholdScheme::Normal,
        ThresholdScheme::LongTail,
        ThresholdScheme::XavierUniform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ThresholdScheme::AllOnes => "all-ones",
            ThresholdScheme::Uniform => "uniform",
            ThresholdScheme::Normal => "normal",
            ThresholdScheme::LongTail => "long-tail",
            ThresholdScheme::XavierUniform => "xavier-uniform",
        }
    }
}

impl fmt::Display for ThresholdScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ThresholdScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ThresholdScheme::ALL
            .into_iter()
            .find(|scheme| scheme.name() == s)
            .ok_or_else(|| Error::UnknownName {
                kind: "threshold initializer",
                name: s.to_string(),
            })
    }
}

/// Xavier-uniform bound for a `rows × cols` table.
pub fn xavier_bound(rows: usize, cols: usize) -> f64 {
    (6.0 / (rows + cols) as f64).sqrt()
}

pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut impl RngCore) -> Table {
    let a = xavier_bound(rows, cols);
    Table::from_fn(rows, cols, |_, _| (2.0 * unit_f64(rng) - 1.0) * a)
}

/// Dense codebook values `P` (or `Q`) and their soft thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub values: Table,
    pub thresholds: Table,
}

impl Codebook {
    pub fn new(values: Table, thresholds: Table) -> Result<Self> {
        if values.shape() != thresholds.shape() {
            return Err(Error::Shape(format!(
                "values {:?} vs thresholds {:?}",
                values.shape(),
                thresholds.shape()
            )));
        }
        if !values.all_finite() || !thresholds.all_finite() {
            return Err(Error::Shape("codebook holds non-finite entries".into()));
        }
        Ok(Self { values, thresholds })
    }

    pub fn buckets(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn pruned_row(&self, row: usize, out: &mut [f64]) {
        prune_row(self.values.row(row), self.thresholds.row(row), out);
    }
}

/// Xavier-uniform values and thresholds drawn from `scheme` plus `offset`.
/// Values are drawn before thresholds from the same stream.
pub fn init_codebook(
    buckets: usize,
    dim: usize,
    rng: &mut Rng,
    scheme: ThresholdScheme,
    offset: f64,
) -> Result<Codebook> {
    if buckets == 0 || dim == 0 {
        return Err(Error::Shape(format!(
            "codebook must be at least 1×1, got {buckets}×{dim}"
        )));
    }
    let values = xavier_uniform(buckets, dim, rng);
    let mut thresholds = match scheme {
        ThresholdScheme::AllOnes => Table::filled(buckets, dim, 1.0),
        ThresholdScheme::Uniform => Table::from_fn(buckets, dim, |_, _| unit_f64(rng)),
        ThresholdScheme::Normal => {
            Table::from_fn(buckets, dim, |_, _| StandardNormal.sample(rng))
        }
        ThresholdScheme::LongTail => {
            let raw = Table::from_fn(buckets, dim, |_, _| {
                let z: f64 = StandardNormal.sample(rng);
                z.abs().powi(3)
            });
            let max = raw.as_slice().iter().copied().fold(0.0, f64::max);
            if max > 0.0 {
                raw.map(|x| x / max)
            } else {
                raw
            }
        }
        ThresholdScheme::XavierUniform => xavier_uniform(buckets, dim, rng),
    };
    if offset != 0.0 {
        thresholds.as_mut_slice().iter_mut().for_each(|s| *s += offset);
    }
    Codebook::new(values, thresholds)
}

/// Pruned, immutable view of a codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCodebook {
    values: Table,
    nnz: usize,
}

impl SparseCodebook {
    /// Wraps a table whose zeros are the pruned entries.
    pub fn from_dense(values: Table) -> Self {
        let nnz = values.count_nonzero();
        Self { values, nnz }
    }

    pub fn values(&self) -> &Table {
        &self.values
    }

    pub fn into_values(self) -> Table {
        self.values
    }

    pub fn nnz(&self) -> usize {
        self.nnz
    }

    pub fn buckets(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        self.values.row(r)
    }

    /// Rounds every value to f32 precision. Entries that underflow to zero
    /// become pruned.
    pub fn round_to_f32(&self) -> Self {
        Self::from_dense(self.values.map(|x| x as f32 as f64))
    }
}

pub fn prune_view(cb: &Codebook) -> SparseCodebook {
    let (rows, cols) = cb.values.shape();
    let mut out = Table::zeros(rows, cols);
    for r in 0..rows {
        prune_row(cb.values.row(r), cb.thresholds.row(r), out.row_mut(r));
    }
    SparseCodebook::from_dense(out)
}

/// Sum-pooled embedding `p̂[k_p] + q̂[k_q]`.
pub fn compose(sp: &SparseCodebook, sq: &SparseCodebook, idx: EntityIndex) -> Vec<f64> {
    sp.row(idx.p)
        .iter()
        .zip(sq.row(idx.q))
        .map(|(a, b)| a + b)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityStats {
    /// Stored nonzeros over the size of a full `N × d` table.
    pub kept_ratio: f64,
    pub pruned_fraction: f64,
}

pub fn sparsity_stats(
    sp: &SparseCodebook,
    sq: &SparseCodebook,
    num_entities: usize,
    dim: usize,
) -> SparsityStats {
    sparsity_from_nnz(sp.nnz() + sq.nnz(), num_entities, dim)
}

pub fn sparsity_from_nnz(nnz: usize, num_entities: usize, dim: usize) -> SparsityStats {
    let kept_ratio = nnz as f64 / (num_entities * dim) as f64;
    SparsityStats {
        kept_ratio,
        pruned_fraction: 1.0 - kept_ratio,
    }
}

/// Binary support mask of a pruned codebook.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl PruneMask {
    pub fn from_bits(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::Shape(format!(
                "mask of {} entries for a {rows}×{cols} table",
                bits.len()
            )));
        }
        Ok(Self { rows, cols, bits })
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![true; rows * cols],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.bits[r * self.cols..(r + 1) * self.cols]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn nnz(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Zeroes every masked-out entry of `table` in place.
    pub fn apply(&self, table: &mut Table) -> Result<()> {
        if table.shape() != self.shape() {
            return Err(Error::Shape(format!(
                "mask {:?} vs table {:?}",
                self.shape(),
                table.shape()
            )));
        }
        for (x, &keep) in table.as_mut_slice().iter_mut().zip(&self.bits) {
            if !keep {
                *x = 0.0;
            }
        }
        Ok(())
    }
}

pub fn mask_of(sparse: &SparseCodebook) -> PruneMask {
    let (rows, cols) = sparse.values.shape();
    PruneMask {
        rows,
        cols,
        bits: sparse.values.as_slice().iter().map(|&x| x != 0.0).collect(),
    }
}

pub fn extract_masks(sp: &SparseCodebook, sq: &SparseCodebook) -> (PruneMask, PruneMask) {
    (mask_of(sp), mask_of(sq))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingStats {
    /// Mean count of nonzero entries in the composed embeddings.
    pub avg_dim: f64,
    /// Mean of `|supp(p̂) ∩ supp(q̂)| / d`.
    pub overlap_rate: f64,
    /// Mean of `|supp(p̂) ∩ supp(q̂)| / |supp(p̂) ∪ supp(q̂)|` (0 for an empty union).
    pub overlap_over_union: f64,
    /// Mean of `|supp(p̂) ∩ supp(q̂)| / min(|supp(p̂)|, |supp(q̂)|)` (0 when either is empty).
    pub overlap_over_min: f64,
}

pub fn embedding_stats(sp: &SparseCodebook, sq: &SparseCodebook, spec: &HashSpec) -> EmbeddingStats {
    let d = sp.dim();
    let n = spec.num_entities();
    let (mut dims, mut over_d, mut over_union, mut over_min) = (0usize, 0.0, 0.0, 0.0);
    for k in 0..n {
        let idx = spec.index(k);
        let (p, q) = (sp.row(idx.p), sq.row(idx.q));
        let (mut inter, mut union, mut np, mut nq) = (0usize, 0usize, 0usize, 0usize);
        for j in 0..d {
            let (a, b) = (p[j] != 0.0, q[j] != 0.0);
            np += a as usize;
            nq += b as usize;
            inter += (a && b) as usize;
            union += (a || b) as usize;
            dims += (p[j] + q[j] != 0.0) as usize;
        }
        over_d += inter as f64 / d as f64;
        if union > 0 {
            over_union += inter as f64 / union as f64;
        }
        if np.min(nq) > 0 {
            over_min += inter as f64 / np.min(nq) as f64;
        }
    }
    let n = n as f64;
    EmbeddingStats {
        avg_dim: dims as f64 / n,
        overlap_rate: over_d / n,
        overlap_over_union: over_union / n,
        overlap_over_min: over_min / n,
    }
}
