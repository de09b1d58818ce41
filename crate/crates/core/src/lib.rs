//! Next-item sequential recommendation.
//!
//! Purchase histories are grouped into per-user sequences, cut into fixed
//! 12-slot windows (11 inputs, 1 label) and fed to a two-layer stateless
//! LSTM whose softmax spans every item that ever appeared as a non-first
//! purchase. Input items are encoded as `[has_embedding, id / max_id,
//! skip-gram vector...]`, with the skip-gram vectors trained separately on
//! view sequences.
//!
//! Pipeline stages, each in its own module:
//!
//! * [`corpus`]: ingestion, ordering, vocabularies, moving windows
//! * [`embedding`]: skip-gram with negative sampling, item feature vectors
//! * [`lstm`]: forward/backward pass, Adam, gradient checking
//! * [`trainer`]: mini-batch training loop
//! * [`predictor`]: next-order, seed-item and rollout prediction, sharded batch scoring
//! * [`evaluator`]: true-item rank, hit@k, NDCG@k, Wilcoxon signed-rank test
//! * [`synthgen`]: synthetic catalogs with planted lifecycle structure
//! * [`artifact`]: on-disk formats

pub mod artifact;
pub mod config;
pub mod corpus;
pub mod embedding;
mod error;
pub mod evaluator;
pub mod lstm;
pub mod pipeline;
pub mod predictor;
mod rng;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};

/// Product identifier. `0` is reserved for padding.
pub type ItemId = u32;

/// The padding sentinel that fills short windows.
pub const PAD: ItemId = 0;
