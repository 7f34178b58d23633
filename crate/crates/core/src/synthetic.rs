//! Clustered implicit-feedback generator for experiments without a public
//! dataset.
//!
//! Users and items are dealt round-robin into clusters. Each user draws a
//! degree around the mean and then picks items from their own cluster with
//! probability `in_cluster`, otherwise from the whole catalogue. Within a
//! pool, items are weighted `1 / (rank + 1)^skew`.

use std::collections::HashSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;

use crate::data::InteractionLog;
use crate::rng::{self, unit_f64, uniform_index, Stream};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub num_items: usize,
    /// Approximate total number of distinct pairs.
    pub interactions: usize,
    pub clusters: usize,
    pub in_cluster: f64,
    pub skew: f64,
}

impl SyntheticConfig {
    pub fn new(num_users: usize, num_items: usize, interactions: usize) -> Self {
        Self {
            num_users,
            num_items,
            interactions,
            clusters: 10,
            in_cluster: 0.95,
            skew: 0.6,
        }
    }

    /// 943 users, 1,682 items, about 100k interactions.
    pub fn movielens_sized() -> Self {
        Self::new(943, 1682, 100_000)
    }

    fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synthetic data: {m}")));
        if self.num_users == 0 || self.num_items == 0 || self.interactions == 0 {
            return fail("sizes must be positive");
        }
        if self.clusters == 0 || self.clusters > self.num_items.min(self.num_users) {
            return fail("clusters must be between 1 and min(users, items)");
        }
        if !(0.0..=1.0).contains(&self.in_cluster) || !(self.skew >= 0.0) {
            return fail("in_cluster must lie in [0, 1] and skew must be non-negative");
        }
        Ok(())
    }
}

fn zipf(n: usize, skew: f64) -> WeightedIndex<f64> {
    WeightedIndex::new((0..n).map(|r| 1.0 / ((r + 1) as f64).powf(skew))).expect("non-empty positive weights")
}

/// Generates a log whose user and item tokens are their synthetic ids.
pub fn generate(cfg: &SyntheticConfig, seed: u64) -> Result<InteractionLog> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, Stream::Synthetic);
    let cluster_items: Vec<Vec<usize>> = (0..cfg.clusters)
        .map(|c| (c..cfg.num_items).step_by(cfg.clusters).collect())
        .collect();
    let in_pool: Vec<WeightedIndex<f64>> = cluster_items.iter().map(|items| zipf(items.len(), cfg.skew)).collect();
    let global = zipf(cfg.num_items, cfg.skew);
    // global popularity order is a fixed shuffle so it does not line up
    // with cluster membership
    let mut global_order: Vec<usize> = (0..cfg.num_items).collect();
    rng::shuffle(&mut rng, &mut global_order);

    let mean = cfg.interactions as f64 / cfg.num_users as f64;
    let mut pairs = Vec::with_capacity(cfg.interactions);
    for user in 0..cfg.num_users {
        let cluster = user % cfg.clusters;
        let pool = &cluster_items[cluster];
        let degree = ((0.5 + unit_f64(&mut rng)) * mean).round().max(1.0) as usize;
        let degree = degree.min(cfg.num_items);
        let mut seen = HashSet::with_capacity(degree);
        let mut attempts = 0;
        while seen.len() < degree && attempts < 50 * degree {
            attempts += 1;
            let item = if unit_f64(&mut rng) < cfg.in_cluster {
                pool[in_pool[cluster].sample(&mut rng)]
            } else {
                global_order[global.sample(&mut rng)]
            };
            if seen.insert(item) {
                pairs.push((user, item));
            }
        }
        if seen.is_empty() {
            pairs.push((user, pool[uniform_index(&mut rng, pool.len())]));
        }
    }
    InteractionLog::from_pairs(pairs)
}

/// Tab-separated `user item` lines, the format the loader reads.
pub fn to_text(log: &InteractionLog) -> String {
    let mut out = String::with_capacity(log.pairs.len() * 10);
    for &(u, i) in &log.pairs {
        out.push_str(log.users.token(u).unwrap_or_default());
        out.push('\t');
        out.push_str(log.items.token(i).unwrap_or_default());
        out.push('\n');
    }
    out
}
