//! Model assembly, optimization and the training loop.

pub mod config;
pub mod model;
pub mod optim;
pub mod trainer;

#[cfg(test)]
mod tests;

pub use config::{BetaConfig, DecoderConfig, InitConfig, ModalityConfig, OptimizerKind, PretrainConfig, PretrainMode, TrainConfig};
pub use model::{Decoder, Forward, ForwardOptions, GammaSource, Model, Objective, ParamGroup};
pub use optim::Optimizer;
pub use trainer::{EpochRecord, StepOutcome, TrainState, Trainer};
