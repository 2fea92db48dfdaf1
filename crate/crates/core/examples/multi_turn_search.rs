//! The multi-turn search task: a scripted expert and a random policy play
//! the same instances, then a short GRPO run shows the trainer handling
//! multi-turn trajectories.
//!
//! ```text
//! cargo run --release --example multi_turn_search
//! ```

use rlforge::algo::Registry;
use rlforge::cli::render_record;
use rlforge::config::load_config;
use rlforge::engine::{inference_engine, InProcessTrainer, OptimizerConfig};
use rlforge::env::{answer_tokens, generate_instances, reset, step, verify, EnvKind, EnvSpec, GroundTruth};
use rlforge::pipeline::Trainer;
use rlforge::policy::{PolicyParams, SamplingConfig};
use rlforge::proto::{flatten_state, DumpRecord, Trajectory};
use rlforge::roles::{Actor, RolloutPrompt};

fn main() -> rlforge::Result<()> {
    let spec = EnvSpec::default_for(EnvKind::MultiTurnSearch);
    let vocab = spec.vocab();
    let instances = generate_instances(&spec, 4, 0)?;

    // Expert: look at the queried cell, then answer with what it shows.
    let inst = &instances[0];
    let (row, col) = inst.query.expect("search instances carry a query cell");
    let look = vec![vocab.look().expect("search vocab has look"), row as u32, col as u32];
    let s0 = reset(inst, 0);
    let (s1, r1) = step(inst, &s0, &look, 1);
    println!("after looking at ({row}, {col}): done = {}", r1.done);
    let (s2, _) = step(inst, &s1, &answer_tokens(inst), 2);
    let flat = flatten_state(&s2, &vocab.placeholder_policy(spec.height, spec.width))?;
    let expert = Trajectory {
        initial_state: s0,
        final_state: s2,
        sampled_logprobs: vec![0.0; flat.tokens.len()],
        flat_tokens: flat.tokens,
        response_mask: flat.response_mask,
        turn_count: 2,
        reward_components: Default::default(),
        total_reward: 0.0,
        group_id: 0,
        prompt_id: inst.id,
        rng_seed: 0,
        truncated: false,
        greedy_baseline: false,
    };
    let GroundTruth::Symbol(answer) = inst.ground_truth else { unreachable!() };
    println!("expert correct: {} (answer {answer})", verify(&expert, inst).correct);
    let mut text = String::new();
    render_record(&mut text, 0, &DumpRecord::from_trajectory(&expert, Some(vocab)));
    println!("{text}");

    // An untrained policy sampling through the rollout engine.
    let params = PolicyParams::init(spec.hyper(32, 16), 0)?;
    let sampling = SamplingConfig {
        max_new_tokens: spec.max_new_tokens,
        stop_tokens: spec.stop_tokens(),
        ..SamplingConfig::default()
    };
    let ph = vocab.placeholder_policy(spec.height, spec.width);
    let actor = Actor::new(Box::new(InProcessTrainer::prepared(params, OptimizerConfig::default())?), sampling, ph)?;
    let mut engine = inference_engine("inprocess")?;
    engine.sync_weights(actor.old())?;
    engine.load()?;
    let prompts: Vec<RolloutPrompt<'_>> = instances
        .iter()
        .enumerate()
        .map(|(i, instance)| RolloutPrompt { instance, group_id: i as u64, seed: i as u64 })
        .collect();
    let rollouts = actor.generate_rollouts(&prompts, 4, false, engine.as_ref())?;
    let turns: Vec<usize> = rollouts.iter().map(|t| t.turn_count).collect();
    let correct = rollouts.iter().zip(0..).filter(|(t, i)| verify(t, &instances[i / 4]).correct).count();
    println!("random policy: turns per episode {turns:?}, {correct}/{} correct", rollouts.len());
    engine.offload()?;

    // A short training run on the same task.
    let cfg = load_config(
        None,
        &[
            "data.env=multi_turn_search".into(),
            "trainer.steps_per_iteration=50".into(),
            "trainer.log_every=0".into(),
        ],
    )?;
    let summary = Trainer::new(cfg, Registry::with_builtins())?.run()?;
    for m in summary.history.iter().step_by(10) {
        println!(
            "step {:>3}: mean_reward {:.3} mean_turns {:.2} truncated {:.2}",
            m.global_step, m.mean_reward, m.mean_turns, m.truncated_fraction
        );
    }
    Ok(())
}
