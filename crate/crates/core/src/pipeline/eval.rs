use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::algo::Registry;
use crate::config::RunConfig;
use crate::engine::{InProcessEngine, InferenceEngine};
use crate::env::{verify, EnvSpec, TaskInstance};
use crate::error::{Error, Result};
use crate::policy::{load_params, PolicyParams, SamplingConfig};
use crate::reward::{score, RewardConfig};
use crate::roles::{run_episodes, RolloutPrompt};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_reward: f64,
    pub mean_turns: f64,
    pub format_rate: f64,
    pub instances: usize,
}

/// Greedy decoding over `instances`; deterministic.
pub fn evaluate_policy(
    params: &PolicyParams,
    spec: &EnvSpec,
    instances: &[TaskInstance],
    reward: &RewardConfig,
    registry: &Registry,
) -> Result<EvalReport> {
    if instances.is_empty() {
        return Err(Error::EmptyInput(
            "evaluation needs at least one instance".into(),
        ));
    }
    if params.hyper != spec.hyper(params.hyper.d_model, params.hyper.d_visual) {
        return Err(Error::Schema(format!(
            "policy shape does not fit the {} environment",
            spec.kind.name()
        )));
    }
    let mut engine = InProcessEngine::new();
    engine.sync_weights(params)?;
    engine.load()?;
    let prompts: Vec<RolloutPrompt<'_>> = instances
        .iter()
        .enumerate()
        .map(|(i, instance)| RolloutPrompt {
            instance,
            group_id: i as u64,
            seed: 0,
        })
        .collect();
    let sampling = SamplingConfig {
        temperature: 0.0,
        max_new_tokens: spec.max_new_tokens,
        stop_tokens: spec.stop_tokens(),
        ..SamplingConfig::default()
    };
    let placeholder = spec.vocab().placeholder_policy(spec.height, spec.width);
    let trajectories = run_episodes(
        &prompts,
        0,
        true,
        &sampling,
        &placeholder,
        params.hyper.max_len,
        &engine,
    )?;
    engine.offload()?;
    let (mut correct, mut formatted, mut total, mut turns) = (0usize, 0usize, 0.0, 0.0);
    for (t, inst) in trajectories.iter().zip(instances) {
        let v = verify(t, inst);
        correct += usize::from(v.correct);
        formatted += usize::from(v.format_ok);
        total += score(t, inst, reward, registry)?.0;
        turns += t.turn_count as f64;
    }
    let n = instances.len() as f64;
    Ok(EvalReport {
        accuracy: correct as f64 / n,
        mean_reward: total / n,
        mean_turns: turns / n,
        format_rate: formatted as f64 / n,
        instances: instances.len(),
    })
}

/// Loads policy parameters from a training step directory, a policy engine
/// checkpoint or a bare parameter directory.
pub fn load_policy(dir: &Path) -> Result<PolicyParams> {
    for candidate in [
        dir.join("policy").join("params"),
        dir.join("params"),
        dir.to_path_buf(),
    ] {
        if candidate.join("manifest.json").is_file() {
            return Ok(load_params::<PolicyParams>(&candidate)?.0);
        }
    }
    Err(Error::Schema(format!(
        "no policy checkpoint found under {}",
        dir.display()
    )))
}

/// Evaluates the checkpoint at `ckpt` on `instances` under `cfg`.
pub fn evaluate(
    cfg: &RunConfig,
    registry: &Registry,
    ckpt: &Path,
    instances: &[TaskInstance],
) -> Result<EvalReport> {
    let params = load_policy(ckpt)?;
    let spec = cfg.data.env_spec();
    evaluate_policy(
        &params,
        &spec,
        instances,
        &cfg.reward.to_reward_config()?,
        registry,
    )
}
