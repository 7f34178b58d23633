//! Compositional entity embeddings built from two balanced, jointly pruned
//! codebooks.
//!
//! Every user and item is hashed to one row of each of two small `b × d`
//! codebooks and its embedding is the sum of the two soft-threshold pruned
//! rows. Training runs in two phases:
//!
//! 1. **Pruning**: BPR ranking loss plus a smooth nonzero-count regularizer
//!    on the composed embeddings, optimized jointly with the per-entry soft
//!    thresholds until the requested sparsity is reached.
//! 2. **Retraining**: the pruning masks are frozen and the surviving
//!    entries are retrained on the ranking loss alone.
//!
//! The [`eval`] module implements full-ranking NDCG@N / Recall@N, and
//! [`csr`] / [`checkpoint`] hold the on-disk formats.

pub mod checkpoint;
pub mod codebook;
pub mod config;
pub mod csr;
pub mod data;
pub mod error;
pub mod eval;
pub mod export;
pub mod grad;
pub mod hashing;
pub mod loss;
pub mod manifest;
pub mod optim;
pub mod rng;
pub mod scorer;
pub mod synthetic;
pub mod table;
pub mod train;

pub use error::{Error, Result};
