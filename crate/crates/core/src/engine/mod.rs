//! Execution backends behind two narrow interfaces: a train engine that owns
//! parameters and optimizer state, and an inference engine with an explicit
//! load/offload lifecycle.

mod inference;
mod naive;
mod train;

pub use inference::{GenerationRequest, InProcessEngine, InferenceEngine};
pub use naive::NaiveF32Engine;
pub use train::{
    load_checkpoint, InProcessTrainer, OptimizerConfig, OptimizerKind, OptimizerState, StepStats,
    TrainEngine,
};

use crate::error::{Error, Result};

/// Builds an inference engine by its configuration name.
pub fn inference_engine(name: &str) -> Result<Box<dyn InferenceEngine>> {
    match name {
        "inprocess" => Ok(Box::new(InProcessEngine::new())),
        "naive_f32" => Ok(Box::new(NaiveF32Engine::new())),
        other => Err(Error::Config(format!(
            "unknown inference engine `{other}`; available: inprocess, naive_f32"
        ))),
    }
}
