//! GRU session encoder with an item-embedding output head tied to the input
//! embeddings.
//!
//! Serves both as the pretrained reference model used for partitioning and
//! as each shard's sub-model.

mod gru;
mod train;

pub use gru::{gru_cell, gru_cell_backward, CellCache, GruModel};
pub use train::{fit_backbone, train_backbone, BackboneConfig, BackboneFit};
