//! Two-stage training of re-parametrized networks: full-precision
//! pre-training followed by quantization-aware training, under the Plain,
//! Merged and RepQ strategies.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod flops;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod verify;

pub use config::{BnMode, ExperimentConfig, StageForm, Strategy, StrategyConfig};
pub use data::Dataset;
pub use error::{Result, TrainError};
pub use model::{Architecture, Model, Path};
pub use pipeline::{convert_for_qat, evaluate, fit, run_seed, SeedOutcome};

pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
