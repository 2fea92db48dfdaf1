mod common;

use rlforge::algo::{estimate_advantages, AlgoConfig, Registry};
use rlforge::engine::*;
use rlforge::env::{generate_instances, EnvKind, EnvSpec, TaskInstance};
use rlforge::policy::{CriticParams, ParamSet, PolicyParams, SamplingConfig};
use rlforge::proto::{field, make_batch, Trajectory, TrajectoryBatch};
use rlforge::reward::RewardConfig;
use rlforge::roles::*;
use rlforge::Error;

fn spec(kind: EnvKind) -> EnvSpec {
    EnvSpec::default_for(kind)
}

fn actor(spec: &EnvSpec, seed: u64, opt: OptimizerConfig) -> Actor {
    let params = PolicyParams::init(spec.hyper(16, 8), seed).unwrap();
    let sampling = SamplingConfig {
        temperature: 1.0,
        max_new_tokens: spec.max_new_tokens,
        stop_tokens: spec.stop_tokens(),
        ..SamplingConfig::default()
    };
    let ph = spec.vocab().placeholder_policy(spec.height, spec.width);
    Actor::new(Box::new(InProcessTrainer::prepared(params, opt).unwrap()), sampling, ph).unwrap()
}

fn loaded(name: &str, a: &Actor) -> Box<dyn InferenceEngine> {
    let mut e = inference_engine(name).unwrap();
    e.sync_weights(a.old()).unwrap();
    e.load().unwrap();
    e
}

fn prompts(set: &[TaskInstance]) -> Vec<RolloutPrompt<'_>> {
    set.iter()
        .enumerate()
        .map(|(i, instance)| RolloutPrompt { instance, group_id: i as u64, seed: 1000 + i as u64 })
        .collect()
}

fn scored(spec: &EnvSpec, set: &[TaskInstance], trajs: &mut [Trajectory]) -> TrajectoryBatch {
    let role = RewardRole::new(RewardConfig::default(), Registry::with_builtins()).unwrap();
    let k = trajs.len() / set.len();
    let inst: Vec<&TaskInstance> = (0..trajs.len()).map(|i| &set[i / k]).collect();
    role.score_all(trajs, &inst).unwrap();
    let mut b = make_batch(trajs, spec.vocab().pad()).unwrap();
    role.score_batch(&mut b, &inst).unwrap();
    b
}

#[test]
fn rollout_counts_and_groups() {
    let s = spec(EnvKind::GridCount);
    let set = generate_instances(&s, 2, 0).unwrap();
    let a = actor(&s, 0, OptimizerConfig::default());
    let e = loaded("inprocess", &a);
    let t = a.generate_rollouts(&prompts(&set), 4, false, e.as_ref()).unwrap();
    assert_eq!(t.len(), 8);
    let ids: Vec<u64> = t.iter().map(|x| x.group_id).collect();
    assert_eq!(ids, vec![0, 0, 0, 0, 1, 1, 1, 1]);
    assert!(t.iter().all(|x| !x.greedy_baseline));
    for x in &t {
        x.check_invariants(s.max_turns).unwrap();
    }

    let t = a.generate_rollouts(&prompts(&set), 4, true, e.as_ref()).unwrap();
    assert_eq!(t.len(), 10);
    let greedy: Vec<usize> = (0..t.len()).filter(|&i| t[i].greedy_baseline).collect();
    assert_eq!(greedy, vec![4, 9]);
    assert_eq!(t[4].group_id, 0);
}

#[test]
fn rollouts_are_deterministic_and_seeded() {
    let s = spec(EnvKind::MultiTurnSearch);
    let set = generate_instances(&s, 3, 0).unwrap();
    let a = actor(&s, 1, OptimizerConfig::default());
    let e = loaded("inprocess", &a);
    let x = a.generate_rollouts(&prompts(&set), 4, false, e.as_ref()).unwrap();
    let y = a.generate_rollouts(&prompts(&set), 4, false, e.as_ref()).unwrap();
    assert_eq!(x, y);
    let mut shifted = prompts(&set);
    shifted.iter_mut().for_each(|p| p.seed += 1);
    let z = a.generate_rollouts(&shifted, 4, false, e.as_ref()).unwrap();
    assert_ne!(x, z);
}

#[test]
fn multi_turn_rollouts_respect_turn_limit() {
    let s = spec(EnvKind::MultiTurnSearch);
    let set = generate_instances(&s, 8, 3).unwrap();
    let a = actor(&s, 2, OptimizerConfig::default());
    let e = loaded("inprocess", &a);
    for t in a.generate_rollouts(&prompts(&set), 4, false, e.as_ref()).unwrap() {
        t.check_invariants(s.max_turns).unwrap();
        assert!(t.turn_count >= 1 && t.turn_count <= s.max_turns);
        assert!(t.initial_state.is_prefix_of(&t.final_state));
    }
}

#[test]
fn offloaded_engine_is_a_lifecycle_error() {
    let s = spec(EnvKind::GridCount);
    let set = generate_instances(&s, 1, 0).unwrap();
    let a = actor(&s, 0, OptimizerConfig::default());
    let mut e = loaded("inprocess", &a);
    e.offload().unwrap();
    let err = a.generate_rollouts(&prompts(&set), 2, false, e.as_ref()).unwrap_err();
    assert!(matches!(err, Error::Lifecycle(_)));
}

#[test]
fn recomputed_old_logprobs_match_sampled() {
    for (kind, engine) in [
        (EnvKind::GridCount, "inprocess"),
        (EnvKind::MultiTurnSearch, "inprocess"),
        (EnvKind::GridCount, "naive_f32"),
        (EnvKind::MultiTurnSearch, "naive_f32"),
    ] {
        let s = spec(kind);
        let set = generate_instances(&s, 8, 5).unwrap();
        let a = actor(&s, 3, OptimizerConfig::default());
        let e = loaded(engine, &a);
        let mut t = a.generate_rollouts(&prompts(&set), 8, false, e.as_ref()).unwrap();
        assert_eq!(t.len(), 64);
        let mut b = scored(&s, &set, &mut t);
        a.annotate_old_logprobs(&mut b).unwrap();
        let old = b.data(field::OLD_LOGPROBS).unwrap();
        let sampled = b.data(field::SAMPLED_LOGPROBS).unwrap();
        let mask = b.data(field::RESPONSE_MASK).unwrap();
        let worst = (0..old.len())
            .filter(|&i| mask[i] == 1.0)
            .map(|i| (old[i] - sampled[i]).abs())
            .fold(0.0, f64::max);
        let tol = if engine == "inprocess" { 1e-12 } else { 1e-5 };
        assert!(worst < tol, "{kind:?}/{engine}: {worst}");
        let live = a.compute_logprobs(&b, LogprobSource::Live).unwrap();
        assert_eq!(live, old);
    }
}

fn prepared_batch(a: &Actor, s: &EnvSpec, seed: u64) -> TrajectoryBatch {
    let set = generate_instances(s, 4, seed).unwrap();
    let e = loaded("inprocess", a);
    let mut t = a.generate_rollouts(&prompts(&set), 8, false, e.as_ref()).unwrap();
    let mut b = scored(s, &set, &mut t);
    a.annotate_old_logprobs(&mut b).unwrap();
    // A fresh policy almost never answers correctly, so plant varied rewards.
    let w = b.max_len();
    let mut dense = vec![0.0; b.rows() * w];
    for r in 0..b.rows() {
        dense[r * w + b.last_response_position(r).unwrap()] = ((r * 7 + seed as usize) % 5) as f64 / 4.0;
    }
    b.set_field(field::REWARDS, 0.0, dense).unwrap();
    b
}

#[test]
fn zero_advantages_leave_parameters_unchanged() {
    let s = spec(EnvKind::GridCount);
    let mut a = actor(&s, 4, OptimizerConfig::default());
    let mut b = prepared_batch(&a, &s, 0);
    b.set_field(field::ADVANTAGES, 0.0, vec![0.0; b.rows() * b.max_len()]).unwrap();
    let before = a.live().unwrap().clone();
    let st = a.update(&b, &AlgoConfig::default(), &Registry::with_builtins()).unwrap();
    assert_eq!(st.grad_norm, 0.0);
    assert_eq!(st.loss, 0.0);
    let after = a.live().unwrap();
    let mut diff = after.clone();
    diff.add_scaled(-1.0, &before);
    assert!(diff.squared_norm().sqrt() < 1e-12);
}

#[test]
fn update_is_deterministic_and_moves_off_the_old_policy() {
    let s = spec(EnvKind::GridCount);
    let reg = Registry::with_builtins();
    let cfg = AlgoConfig::default();
    let run = || {
        let mut a = actor(&s, 5, OptimizerConfig::default());
        let mut b = prepared_batch(&a, &s, 1);
        estimate_advantages(&mut b, &cfg, &reg).unwrap();
        let st = a.update(&b, &cfg, &reg).unwrap();
        (a, b, st)
    };
    let (a, b, st) = run();
    let (_, _, st2) = run();
    assert_eq!(st, st2);
    assert_eq!(st.objective.clip_fraction, 0.0);
    assert!((st.objective.mean_ratio - 1.0).abs() < 1e-15);
    let live = a.compute_logprobs(&b, LogprobSource::Live).unwrap();
    let old = a.compute_logprobs(&b, LogprobSource::Old).unwrap();
    assert!(live.iter().zip(&old).any(|(x, y)| x != y));
}

#[test]
fn loss_descends_over_epochs_on_a_fixed_batch() {
    let s = spec(EnvKind::GridCount);
    let reg = Registry::with_builtins();
    let cfg = AlgoConfig {
        policy_loss: "vanilla".into(),
        ..AlgoConfig::default()
    };
    let opt = OptimizerConfig {
        kind: OptimizerKind::Sgd,
        lr: 0.05,
        ..OptimizerConfig::default()
    };
    let mut a = actor(&s, 6, opt);
    let mut b = prepared_batch(&a, &s, 2);
    estimate_advantages(&mut b, &cfg, &reg).unwrap();
    let losses: Vec<f64> = (0..5).map(|_| a.update(&b, &cfg, &reg).unwrap().loss).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

fn critic(s: &EnvSpec, clip: Option<f64>) -> Critic {
    let params = CriticParams::init(s.hyper(16, 8), 0).unwrap();
    let opt = OptimizerConfig {
        lr: 1e-2,
        ..OptimizerConfig::default()
    };
    let ph = s.vocab().placeholder_policy(s.height, s.width);
    Critic::new(Box::new(InProcessTrainer::prepared(params, opt).unwrap()), clip, ph)
}

#[test]
fn critic_zero_head_and_descent() {
    let s = spec(EnvKind::GridCount);
    let a = actor(&s, 7, OptimizerConfig::default());
    let mut b = prepared_batch(&a, &s, 3);
    let mut c = critic(&s, None);
    c.compute_values(&mut b).unwrap();
    assert!(b.data(field::VALUES).unwrap().iter().all(|&v| v == 0.0));
    estimate_advantages(&mut b, &AlgoConfig { adv_estimator: "gae".into(), ..AlgoConfig::default() }, &Registry::with_builtins()).unwrap();
    let ret = b.data(field::RETURNS).unwrap();
    let mask = b.data(field::RESPONSE_MASK).unwrap();
    let expected = ret.iter().zip(mask).map(|(r, m)| r * r * m).sum::<f64>() / mask.iter().sum::<f64>();
    let first = c.update(&b).unwrap().value_loss;
    assert!((first - expected).abs() < 1e-12);
    let mut losses = vec![first];
    for _ in 0..10 {
        losses.push(c.update(&b).unwrap().value_loss);
    }
    assert!(losses.last().unwrap() < &(0.5 * first), "{losses:?}");

    let mut perfect = b.clone();
    c.compute_values(&mut perfect).unwrap();
    let v = perfect.data(field::VALUES).unwrap().to_vec();
    perfect.set_field(field::RETURNS, 0.0, v).unwrap();
    assert!(c.update(&perfect).unwrap().value_loss < 1e-24);
}

#[test]
fn clipped_critic_update_needs_old_values() {
    let s = spec(EnvKind::GridCount);
    let a = actor(&s, 8, OptimizerConfig::default());
    let mut b = prepared_batch(&a, &s, 4);
    b.set_field(field::RETURNS, 0.0, vec![1.0; b.rows() * b.max_len()]).unwrap();
    let mut c = critic(&s, Some(0.2));
    assert!(matches!(c.update(&b), Err(Error::MissingField(_)) | Err(Error::Protocol(_))));
    c.compute_values(&mut b).unwrap();
    assert!(c.update(&b).unwrap().value_loss > 0.0);
}

#[test]
fn reference_is_frozen_until_refresh() {
    let s = spec(EnvKind::GridCount);
    let reg = Registry::with_builtins();
    let cfg = AlgoConfig::default();
    let mut a = actor(&s, 9, OptimizerConfig { lr: 1e-2, ..OptimizerConfig::default() });
    let ph = s.vocab().placeholder_policy(s.height, s.width);
    let mut r = Reference::new(a.live().unwrap(), RefreshPolicy::PerIteration, ph);
    let mut b = prepared_batch(&a, &s, 5);
    estimate_advantages(&mut b, &cfg, &reg).unwrap();
    r.compute_logprobs(&mut b).unwrap();
    let frozen = b.data(field::REF_LOGPROBS).unwrap().to_vec();
    assert_eq!(frozen, b.data(field::OLD_LOGPROBS).unwrap());
    for _ in 0..3 {
        a.update(&b, &cfg, &reg).unwrap();
    }
    r.compute_logprobs(&mut b).unwrap();
    assert_eq!(b.data(field::REF_LOGPROBS).unwrap(), frozen.as_slice());

    r.refresh(a.live().unwrap());
    r.compute_logprobs(&mut b).unwrap();
    let live = a.compute_logprobs(&b, LogprobSource::Live).unwrap();
    assert_eq!(b.data(field::REF_LOGPROBS).unwrap(), live.as_slice());
}
