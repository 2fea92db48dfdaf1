//! The co-located inference lifecycle: weights are synced from the trainer,
//! loaded for generation, and offloaded while the optimizer runs. Both
//! built-in engines sample the same tokens from the same seed.
//!
//! ```text
//! cargo run --release --example engine_lifecycle
//! ```

use rlforge::engine::{inference_engine, GenerationRequest, InProcessTrainer, OptimizerConfig, TrainEngine};
use rlforge::env::{generate_instances, reset, EnvKind, EnvSpec};
use rlforge::policy::{PolicyParams, SamplingConfig};
use rlforge::proto::flatten_state;

fn main() -> rlforge::Result<()> {
    let spec = EnvSpec::default_for(EnvKind::GridCount);
    let vocab = spec.vocab();
    let params = PolicyParams::init(spec.hyper(32, 16), 0)?;
    let trainer = InProcessTrainer::prepared(params, OptimizerConfig::default())?;

    let instances = generate_instances(&spec, 3, 0)?;
    let ph = vocab.placeholder_policy(spec.height, spec.width);
    let requests = instances
        .iter()
        .map(|inst| {
            Ok(GenerationRequest {
                prefix: flatten_state(&reset(inst, 0), &ph)?.items,
                seed: inst.id,
            })
        })
        .collect::<rlforge::Result<Vec<_>>>()?;
    let sampling = SamplingConfig {
        max_new_tokens: spec.max_new_tokens,
        stop_tokens: spec.stop_tokens(),
        ..SamplingConfig::default()
    };

    for name in ["inprocess", "naive_f32"] {
        let mut engine = inference_engine(name)?;
        println!("{name}: loaded {} resident bytes {}", engine.is_loaded(), engine.resident_bytes());
        engine.sync_weights(trainer.unwrap()?)?;
        engine.load()?;
        println!("{name}: loaded {} resident bytes {}", engine.is_loaded(), engine.resident_bytes());
        for g in engine.generate(&requests, &sampling)? {
            let tokens: Vec<String> = g.tokens.iter().map(|&t| vocab.name(t)).collect();
            let lp: Vec<String> = g.logprobs.iter().map(|l| format!("{l:.6}")).collect();
            println!("  {} | logprobs {}", tokens.join(" "), lp.join(" "));
        }
        engine.offload()?;
        match engine.generate(&requests, &sampling) {
            Err(e) => println!("{name}: after offload, generation is refused: {e}"),
            Ok(_) => unreachable!("offloaded engines do not generate"),
        }
    }
    Ok(())
}
