//! Query–document co-augmentation reinforcement learning for retrieval.
//!
//! A policy learns to append tokens to queries and documents so that a fixed
//! retriever (BM25 or a dense stand-in) ranks relevant documents higher.
//! Training draws self-contained composite batches, scores rollouts with
//! within-batch NDCG estimated by stratified multi-sampling, centers rewards
//! per source text and applies a policy-gradient update.

pub mod advantage;
pub mod analysis;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod policy;
pub mod retrieval;
pub mod reward;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
