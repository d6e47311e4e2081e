//! User-facing layer: configuration, streaming sessions, checkpoints,
//! synthetic data and the toy trainer.

pub mod checkpoint;
mod config;
mod session;
pub mod synth;
mod train;

pub use config::{EngineConfig, ModelParams, TrainConfig};
pub use session::{predict, run_offline, CacheStats, FrameOutput, StreamSession};
pub use train::{toy_train, toy_train_with, StepRecord, Teacher, ToyModel, TrainRun};
