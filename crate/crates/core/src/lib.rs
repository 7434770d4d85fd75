//! Session-based recommendation with item-level unlearning.
//!
//! Training sessions are partitioned into shards by balanced k-means over the
//! hidden states of a pretrained GRU. One GRU sub-model is trained per shard
//! and their hidden states are fused by a centroid-conditioned attention
//! layer. Unlearning a single item rewrites its session (optionally deleting
//! extra correlated items) and retrains only the affected sub-models plus the
//! aggregation layer.

pub mod aggregation;
pub mod backbone;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod framework;
pub mod harness;
pub mod numerics;
pub mod partition;
pub mod unlearning;

pub use error::{Result, SruError};
