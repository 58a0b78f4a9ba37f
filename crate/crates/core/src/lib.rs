//! Dual-level mixture-of-experts engine for multimodal item cold-start
//! recommendation.
//!
//! Items are represented only through precomputed per-modality feature
//! vectors. Each modality passes through its own sparsely gated expert
//! adapter, a learned gate fuses the adapted embeddings into one item
//! embedding, and users are scored against items by dot product. Training
//! uses BPR with load-balancing, fusion-balance, alignment and L2 terms;
//! evaluation ranks held-out cold items with Recall@K and NDCG@K.
//!
//! Module map:
//!
//! - [`numerics`]: dense vectors/matrices, softmax, top-k routing, KL, and a
//!   small reverse-mode tape with a finite-difference checker.
//! - [`data`]: interaction and feature files, cold-start splitting,
//!   synthetic benchmarks, triplet sampling.
//! - [`adapter`]: per-modality expert adapters and router variants.
//! - [`fusion`]: modality gate, balance and alignment regularizers.
//! - [`training`]: model assembly, composite loss, Adam, checkpoints.
//! - [`evaluation`]: cold-item ranking and metrics.
//! - [`cli`]: subcommand implementations behind the `mamex` binary.

pub mod adapter;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod fusion;
pub mod numerics;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
pub use exec::Exec;
