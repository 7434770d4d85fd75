//! Fusion of per-shard session states: a shared affine projection of each
//! sub-model's state and centroid, attention conditioned on the centroid,
//! a convex combination, and a two-layer ReLU output network.

mod layers;
mod model;
mod train;

pub use layers::{
    attention_backward, attention_scores, fuse, fuse_backward, predict, predict_backward,
    predict_cached, project, project_backward, AttentionGrads, AttentionParams, OutputCache,
    OutputGrads, OutputParams,
};
pub use model::{AggForward, AggregationModel, AggregationShape, ShardCentroids};
pub use train::{
    compute_centroid, shard_centroids, train_aggregation, train_aggregation_on, AggregationConfig,
    AggregationFit, CentroidSource, PrefixStates,
};
