//! BPR ranking loss, the pruning regularizer and the γ schedule.

use serde::{Deserialize, Serialize};

use crate::codebook::sigmoid;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Initial regularizer weight γ₀ in `[0, 1]`.
    pub gamma0: f64,
    /// tanh temperature η.
    pub eta: f64,
    /// Halve γ at the end of every pruning epoch.
    pub gamma_decay: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma0: 1e-2,
            eta: 100.0,
            gamma_decay: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma0) {
            return Err(Error::Config(format!("gamma0 {} outside [0, 1]", self.gamma0)));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        Ok(())
    }
}

/// Loss and score gradients for one triplet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BprTerm {
    pub loss: f64,
    pub d_pos: f64,
    pub d_neg: f64,
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `−ln σ(ŷ⁺ − ŷ⁻)` and its gradients `∓σ(−(ŷ⁺ − ŷ⁻))`.
#[inline]
pub fn bpr_loss(pos: f64, neg: f64) -> BprTerm {
    let x = pos - neg;
    let g = sigmoid(-x);
    BprTerm {
        loss: softplus(-x),
        d_pos: -g,
        d_neg: g,
    }
}

/// Contribution `−tanh²(η e)` of one embedding entry and its derivative.
#[inline]
pub fn prune_regularizer_entry(e: f64, eta: f64) -> (f64, f64) {
    let t = (eta * e).tanh();
    (-t * t, -2.0 * eta * t * (1.0 - t * t))
}

/// `−Σ_k ‖tanh(η e_k)‖²` over the batch embeddings, with the per-entry
/// gradient of each embedding.
pub fn prune_regularizer<'a>(
    embeddings: impl IntoIterator<Item = &'a [f64]>,
    eta: f64,
) -> (f64, Vec<Vec<f64>>) {
    let mut total = 0.0;
    let grads = embeddings
        .into_iter()
        .map(|e| {
            e.iter()
                .map(|&x| {
                    let (v, g) = prune_regularizer_entry(x, eta);
                    total += v;
                    g
                })
                .collect()
        })
        .collect();
    (total, grads)
}

/// γ for pruning epoch `epoch` (0-based): `γ₀ · 2^(−epoch)` with decay.
pub fn gamma_at_epoch(cfg: &LossConfig, epoch: usize) -> f64 {
    if cfg.gamma_decay {
        cfg.gamma0 * 0.5f64.powi(epoch.min(i32::MAX as usize) as i32)
    } else {
        cfg.gamma0
    }
}

/// `L_BPR + γ · L_prune`.
#[inline]
pub fn total_loss(bpr_sum: f64, gamma: f64, prune: f64) -> f64 {
    if gamma == 0.0 {
        bpr_sum
    } else {
        bpr_sum + gamma * prune
    }
}
