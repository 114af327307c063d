//! Experiment orchestration: prepare-data, build-index, train, generate,
//! evaluate and report, callable in-process or through the CLI.

pub mod config;
pub mod data;
pub mod evaluate;
pub mod generate;
pub mod model;
pub mod train;

pub use config::{ExperimentConfig, InferRetrieval, PoolName, TrainRetrieval};
pub use data::{build_index, prepare_data, DataDir, DATA_ENV};
pub use evaluate::{evaluate, report, EvalReport};
pub use generate::{generate, GenerateSummary, GenerationSettings};
pub use model::{load_checkpoint, save_checkpoint, Checkpoint, RagModel};
pub use train::{train, TrainOptions, TrainSummary};
