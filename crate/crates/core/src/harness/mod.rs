//! Experiment configuration, checkpoint persistence, report emission and
//! the staged command-line pipeline.

pub mod checkpoint;
pub mod config;
pub mod persist;
pub mod pipeline;
pub mod report;

pub use checkpoint::{Checkpoint, NamedTensor, TensorData};
pub use config::{DataSource, ExperimentConfig, Stage, UnlearnSettings, SEED_ENV};
pub use pipeline::{run_all, Ablation, Pipeline};
pub use report::{Cell, Report, ReportFormat};
