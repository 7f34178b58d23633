//! Full-ranking top-N evaluation: NDCG@N and Recall@N.
//!
//! Every item in the catalogue is scored for each evaluated user. Items the
//! user interacted with in any other partition are masked out, ties are
//! broken by ascending item id, and gains are binary with the usual
//! `1 / log₂(rank + 1)` discount. Users with no positive in the evaluated
//! partition, or no train positive at all, are skipped.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codebook::SparseCodebook;
use crate::data::{InteractionDataset, Partition};
use crate::hashing::HashSpec;
use crate::scorer::{BatchScorer, Scorer};
use crate::table::Table;
use crate::{Error, Result};

pub const DEFAULT_TOPN: usize = 10;

/// Environment variable capping evaluation threads.
pub const WORKERS_ENV: &str = "CERP_NUM_WORKERS";

/// Frozen user and item embeddings plus the scorer that ranks them.
#[derive(Debug, Clone)]
pub struct ModelSnapshot {
    pub users: Table,
    pub items: Table,
    pub scorer: Scorer,
}

impl ModelSnapshot {
    /// Composes every entity embedding from two pruned codebooks.
    pub fn from_codebooks(
        sp: &SparseCodebook,
        sq: &SparseCodebook,
        spec: &HashSpec,
        num_users: usize,
        num_items: usize,
        scorer: Scorer,
    ) -> Result<Self> {
        if spec.num_entities() != num_users + num_items {
            return Err(Error::Shape(format!(
                "hash spec covers {} entities, dataset has {}",
                spec.num_entities(),
                num_users + num_items
            )));
        }
        if sp.buckets() != spec.bucket_size() || sq.buckets() != spec.bucket_size() || sp.dim() != sq.dim() {
            return Err(Error::Shape("codebook shapes do not match the hash spec".into()));
        }
        let d = sp.dim();
        let embed = |k: usize, j: usize| {
            let idx = spec.index(k);
            sp.row(idx.p)[j] + sq.row(idx.q)[j]
        };
        Ok(Self {
            users: Table::from_fn(num_users, d, |u, j| embed(u, j)),
            items: Table::from_fn(num_items, d, |i, j| embed(num_users + i, j)),
            scorer,
        })
    }

    /// Splits a full `(|U| + |I|) × d` table.
    pub fn from_full_table(table: &Table, num_users: usize, scorer: Scorer) -> Result<Self> {
        if table.rows() < num_users {
            return Err(Error::Shape("embedding table has fewer rows than users".into()));
        }
        let d = table.cols();
        Ok(Self {
            users: Table::from_fn(num_users, d, |u, j| table.get(u, j)),
            items: Table::from_fn(table.rows() - num_users, d, |i, j| table.get(num_users + i, j)),
            scorer,
        })
    }

    pub fn num_users(&self) -> usize {
        self.users.rows()
    }

    pub fn num_items(&self) -> usize {
        self.items.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRanking {
    pub user: usize,
    pub top: Vec<usize>,
    pub ndcg: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingResult {
    pub topn: usize,
    pub partition: Partition,
    pub users: Vec<UserRanking>,
    pub ndcg: f64,
    pub recall: f64,
}

/// `(NDCG, Recall)` of one ranked list against sorted positives.
pub fn ndcg_recall(top: &[usize], positives: &[usize], n: usize) -> (f64, f64) {
    if positives.is_empty() {
        return (0.0, 0.0);
    }
    let mut dcg = 0.0;
    let mut hits = 0usize;
    for (rank, item) in top.iter().take(n).enumerate() {
        if positives.binary_search(item).is_ok() {
            dcg += 1.0 / ((rank + 2) as f64).log2();
            hits += 1;
        }
    }
    let idcg: f64 = (0..positives.len().min(n))
        .map(|rank| 1.0 / ((rank + 2) as f64).log2())
        .sum();
    (dcg / idcg, hits as f64 / positives.len() as f64)
}

/// Indices of the `n` best scores among items with `excluded(i) == false`,
/// best first, ties by ascending index.
pub fn top_n(scores: &[f64], excluded: impl Fn(usize) -> bool, n: usize) -> Vec<usize> {
    let mut candidates: Vec<usize> = (0..scores.len()).filter(|&i| !excluded(i)).collect();
    let better = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if candidates.len() > n && n > 0 {
        candidates.select_nth_unstable_by(n - 1, better);
        candidates.truncate(n);
    }
    candidates.truncate(n);
    candidates.sort_by(better);
    candidates
}

fn masked_partitions(partition: Partition) -> Result<[Partition; 2]> {
    match partition {
        Partition::Validation => Ok([Partition::Train, Partition::Test]),
        Partition::Test => Ok([Partition::Train, Partition::Validation]),
        Partition::Train => Err(Error::Config("cannot rank against the train partition".into())),
    }
}

/// Users scored on `partition`.
pub fn evaluated_users(dataset: &InteractionDataset, partition: Partition) -> Vec<usize> {
    (0..dataset.num_users)
        .filter(|&u| !dataset.positives(partition, u).is_empty() && !dataset.train_positives(u).is_empty())
        .collect()
}

fn run_parallel<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    let workers = std::env::var(WORKERS_ENV).ok().and_then(|v| v.parse::<usize>().ok());
    match workers {
        Some(n) if n > 0 => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        _ => f(),
    }
}

/// Ranks with a per-user score function. Shared by model and baseline
/// evaluation.
pub fn rank_users<F>(
    dataset: &InteractionDataset,
    partition: Partition,
    n: usize,
    score_user: F,
) -> Result<RankingResult>
where
    F: Fn(usize, &mut Vec<f64>) + Sync,
{
    let masked = masked_partitions(partition)?;
    if dataset.pairs(partition).is_empty() {
        return Err(Error::Degenerate(format!("{} partition is empty", partition.name())));
    }
    if n == 0 {
        return Err(Error::Config("top-N cutoff must be positive".into()));
    }
    let users = evaluated_users(dataset, partition);
    let rankings: Vec<UserRanking> = run_parallel(|| {
        users
            .par_iter()
            .map_init(Vec::new, |scores, &u| {
                score_user(u, scores);
                let excluded = |i: usize| {
                    masked
                        .iter()
                        .any(|&p| dataset.positives(p, u).binary_search(&i).is_ok())
                };
                let top = top_n(scores, excluded, n);
                let (ndcg, recall) = ndcg_recall(&top, dataset.positives(partition, u), n);
                UserRanking {
                    user: u,
                    top,
                    ndcg,
                    recall,
                }
            })
            .collect()
    });
    let count = rankings.len().max(1) as f64;
    let ndcg = rankings.iter().map(|r| r.ndcg).sum::<f64>() / count;
    let recall = rankings.iter().map(|r| r.recall).sum::<f64>() / count;
    Ok(RankingResult {
        topn: n,
        partition,
        users: rankings,
        ndcg,
        recall,
    })
}

pub fn evaluate(
    snapshot: &ModelSnapshot,
    dataset: &InteractionDataset,
    partition: Partition,
    n: usize,
) -> Result<RankingResult> {
    if snapshot.num_users() != dataset.num_users || snapshot.num_items() != dataset.num_items {
        return Err(Error::Shape(format!(
            "model covers {}×{} users×items, dataset {}×{}",
            snapshot.num_users(),
            snapshot.num_items(),
            dataset.num_users,
            dataset.num_items
        )));
    }
    let batch = BatchScorer::new(&snapshot.scorer, &snapshot.items);
    rank_users(dataset, partition, n, |u, scores| {
        batch.score_all(snapshot.users.row(u), &snapshot.items, scores)
    })
}

/// Ranks items by train interaction count for every user.
pub fn popularity_baseline(
    dataset: &InteractionDataset,
    partition: Partition,
    n: usize,
) -> Result<RankingResult> {
    let popularity: Vec<f64> = dataset.item_popularity().into_iter().map(|c| c as f64).collect();
    rank_users(dataset, partition, n, |_, scores| {
        scores.clear();
        scores.extend_from_slice(&popularity);
    })
}
