//! Experiments 1-3: configuration, data views, AdamW training and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod experiment;
pub mod optim;
pub mod schedule;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use config::{DataSource, Experiment, ExperimentConfig};
pub use dataset::{export_synthetic, find_record, PairRecord, Sample, SyntheticExport, View};
pub use experiment::{evaluate_checkpoint, prepare_data, run_experiment, ExperimentResult};
pub use optim::{AdamW, AdamWConfig};
pub use schedule::{cosine_lr, cross_entropy};
pub use trainer::{evaluate, train, History, TrainOptions, TrainOutcome};
