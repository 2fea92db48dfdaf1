//! Tiny causal transformer policy and critic over mixed text/grid sequences.

mod checkpoint;
mod grad;
mod model;
mod params;
mod sample;

pub use checkpoint::{
    load_params, read_manifest, save_params, Manifest, TensorEntry, FORMAT_VERSION,
};
pub use grad::{
    add_squared_norm, grad, sequence_stats, value_grad, SequenceGrads, SequenceRef, SequenceStats,
};
pub use model::{entropy, forward_logits, last_logits, log_softmax, logprob_of, softmax, value_of};
pub use params::{
    load_into, Connector, CriticParams, Encoder, Hyper, LanguageModel, ParamSet, PolicyParams,
    Tensor, Trunk,
};
pub use sample::{decode, sample, Generation, SamplingConfig};
