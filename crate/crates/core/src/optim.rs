//! Adam with coupled L2 weight decay and lazy per-row updates for
//! codebooks.

use serde::{Deserialize, Serialize};

use crate::table::Table;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update at step `t ≥ 1`. `weight_decay · θ` is
/// added to the gradient before the moment updates.
#[inline]
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &AdamConfig,
) {
    debug_assert!(t >= 1);
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for j in 0..params.len() {
        let g = grads[j] + cfg.weight_decay * params[j];
        m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
        v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[j] / bc1;
        let v_hat = v[j] / bc2;
        params[j] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Moment tables for one parameter table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// Moments per parameter table and the shared step counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub moments: Vec<Moments>,
}

impl AdamState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        Self {
            step: 0,
            moments: sizes.into_iter().map(Moments::zeros).collect(),
        }
    }

    /// Advances the step counter; call once per batch before the updates.
    pub fn begin_step(&mut self) -> u64 {
        self.step += 1;
        self.step
    }

    pub fn update_dense(&mut self, slot: usize, params: &mut [f64], grads: &[f64], cfg: &AdamConfig) {
        let t = self.step.max(1);
        let mo = &mut self.moments[slot];
        adam_update(params, grads, &mut mo.m, &mut mo.v, t, cfg);
    }

    /// Updates only the listed rows of a table.
    pub fn update_rows(
        &mut self,
        slot: usize,
        params: &mut Table,
        grads: &Table,
        rows: &[usize],
        cfg: &AdamConfig,
    ) {
        let t = self.step.max(1);
        let cols = params.cols();
        let mo = &mut self.moments[slot];
        for &r in rows {
            let range = r * cols..(r + 1) * cols;
            adam_update(
                params.row_mut(r),
                grads.row(r),
                &mut mo.m[range.clone()],
                &mut mo.v[range],
                t,
                cfg,
            );
        }
    }
}
