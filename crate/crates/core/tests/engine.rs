mod common;

use std::fs;
use std::path::Path;

use common::{random_policy, random_sequence, rng, tiny_hyper};
use rand::Rng;
use rlforge::engine::*;
use rlforge::policy::{sample, CriticParams, ParamSet, PolicyParams, SamplingConfig};
use rlforge::Error;

fn sgd(lr: f64, clip: Option<f64>) -> OptimizerConfig {
    OptimizerConfig {
        kind: OptimizerKind::Sgd,
        lr,
        grad_clip_norm: clip,
        ..OptimizerConfig::default()
    }
}

/// Gradient with a single nonzero coordinate.
fn one_hot(p: &PolicyParams, index: usize, value: f64) -> PolicyParams {
    let mut g = p.zeros_like();
    g.set_flat(index, value);
    g
}

#[test]
fn prepare_then_unwrap_is_identity() {
    let p = random_policy(1);
    let mut e = InProcessTrainer::new();
    assert!(matches!(e.unwrap(), Err(Error::Lifecycle(_))));
    e.prepare(p.clone(), OptimizerConfig::default()).unwrap();
    assert_eq!(e.unwrap().unwrap(), &p);
    let st = e.optimizer_state().unwrap();
    assert_eq!(st.step, 0);
    assert_eq!(st.m.squared_norm() + st.v.squared_norm(), 0.0);
    assert!(matches!(
        e.prepare(p, OptimizerConfig::default()),
        Err(Error::Lifecycle(_))
    ));
}

#[test]
fn disjoint_handles_are_independent() {
    let p = random_policy(2);
    let mut a = InProcessTrainer::prepared(p.clone(), sgd(0.1, None)).unwrap();
    let b = InProcessTrainer::prepared(p.clone(), sgd(0.1, None)).unwrap();
    a.step(&one_hot(&p, 0, 1.0)).unwrap();
    assert_ne!(a.unwrap().unwrap(), &p);
    assert_eq!(b.unwrap().unwrap(), &p);
}

#[test]
fn sgd_arithmetic() {
    let mut p = random_policy(3);
    p.set_flat(5, 1.0);
    let mut e = InProcessTrainer::prepared(p.clone(), sgd(0.1, None)).unwrap();
    let stats = e.step(&one_hot(&p, 5, 2.0)).unwrap();
    assert!((e.unwrap().unwrap().get_flat(5) - 0.8).abs() < 1e-15);
    assert_eq!(stats.grad_norm_pre_clip, 2.0);
    assert_eq!(stats.applied_lr, 0.1);
    assert_eq!(e.unwrap().unwrap().get_flat(6), p.get_flat(6));
}

#[test]
fn global_norm_clipping_scales_gradient() {
    let p = random_policy(4);
    let mut g = p.zeros_like();
    g.set_flat(0, 4.0 * 0.6);
    g.set_flat(1, 4.0 * 0.8);
    let mut e = InProcessTrainer::prepared(p.clone(), sgd(1.0, Some(1.0))).unwrap();
    let stats = e.step(&g).unwrap();
    assert!((stats.grad_norm_pre_clip - 4.0).abs() < 1e-12);
    let q = e.unwrap().unwrap();
    assert!((p.get_flat(0) - q.get_flat(0) - 0.6).abs() < 1e-12);
    assert!((p.get_flat(1) - q.get_flat(1) - 0.8).abs() < 1e-12);
}

#[test]
fn adam_first_step_is_lr_sized() {
    let p = random_policy(5);
    let mut e = InProcessTrainer::prepared(
        p.clone(),
        OptimizerConfig {
            grad_clip_norm: None,
            lr: 1e-3,
            ..OptimizerConfig::default()
        },
    )
    .unwrap();
    e.step(&one_hot(&p, 3, 1.0)).unwrap();
    let delta = e.unwrap().unwrap().get_flat(3) - p.get_flat(3);
    assert!((delta + 1e-3).abs() < 1e-10, "{delta}");
    let st = e.optimizer_state().unwrap();
    assert_eq!(st.step, 1);
    assert!((st.m.get_flat(3) - 0.1).abs() < 1e-15);
    assert!((st.v.get_flat(3) - 0.001).abs() < 1e-15);
}

#[test]
fn non_finite_or_misshapen_gradients_are_rejected() {
    let p = random_policy(6);
    let mut e = InProcessTrainer::prepared(p.clone(), OptimizerConfig::default()).unwrap();
    assert!(matches!(e.step(&one_hot(&p, 0, f64::NAN)), Err(Error::Numeric(_))));
    assert_eq!(e.unwrap().unwrap(), &p);
    assert_eq!(e.optimizer_state().unwrap().step, 0);
    let mut h = tiny_hyper();
    h.d_model = 4;
    let other = PolicyParams::init(h, 0).unwrap();
    assert!(matches!(e.step(&other.zeros_like()), Err(Error::Schema(_))));
}

#[test]
fn identical_gradients_give_identical_trajectories() {
    let p = random_policy(7);
    let mut a = InProcessTrainer::prepared(p.clone(), OptimizerConfig::default()).unwrap();
    let mut b = InProcessTrainer::prepared(p.clone(), OptimizerConfig::default()).unwrap();
    let mut g = rng(0);
    for _ in 0..20 {
        let mut grad = p.zeros_like();
        for i in 0..grad.num_params() {
            grad.set_flat(i, g.gen_range(-1.0..1.0));
        }
        a.step(&grad).unwrap();
        b.step(&grad).unwrap();
    }
    assert_eq!(a.unwrap().unwrap(), b.unwrap().unwrap());
    assert_eq!(a.optimizer_state().unwrap(), b.optimizer_state().unwrap());
}

fn assert_dirs_identical(a: &Path, b: &Path) {
    let mut names: Vec<_> = fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    let mut other: Vec<_> = fs::read_dir(b).unwrap().map(|e| e.unwrap().file_name()).collect();
    other.sort();
    assert_eq!(names, other);
    for n in names {
        let (pa, pb) = (a.join(&n), b.join(&n));
        if pa.is_dir() {
            assert_dirs_identical(&pa, &pb);
        } else {
            assert_eq!(fs::read(&pa).unwrap(), fs::read(&pb).unwrap(), "{pa:?}");
        }
    }
}

#[test]
fn checkpoint_save_load_save_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let p = random_policy(8);
    let mut e = InProcessTrainer::prepared(p.clone(), OptimizerConfig::default()).unwrap();
    for i in 0..3 {
        e.step(&one_hot(&p, i, 0.5)).unwrap();
    }
    e.save_checkpoint(&dir.path().join("a")).unwrap();
    let mut f = InProcessTrainer::<PolicyParams>::new();
    f.restore(&dir.path().join("a")).unwrap();
    assert_eq!(f.unwrap().unwrap(), e.unwrap().unwrap());
    assert_eq!(f.optimizer_state().unwrap(), e.optimizer_state().unwrap());
    f.save_checkpoint(&dir.path().join("b")).unwrap();
    assert_dirs_identical(&dir.path().join("a"), &dir.path().join("b"));

    // Continuing from the restored state matches continuing the original.
    let g = one_hot(&p, 9, -1.0);
    e.step(&g).unwrap();
    f.step(&g).unwrap();
    assert_eq!(f.unwrap().unwrap(), e.unwrap().unwrap());
}

#[test]
fn checkpoint_refuses_wrong_shape_and_version() {
    let dir = tempfile::tempdir().unwrap();
    let p = random_policy(9);
    let e = InProcessTrainer::prepared(p, OptimizerConfig::default()).unwrap();
    e.save_checkpoint(dir.path()).unwrap();
    let wrong = load_checkpoint::<CriticParams>(dir.path());
    assert!(matches!(wrong, Err(Error::Schema(_))));

    let mut h = tiny_hyper();
    h.d_model = 4;
    let mut small = InProcessTrainer::prepared(PolicyParams::init(h, 0).unwrap(), OptimizerConfig::default()).unwrap();
    assert!(matches!(small.restore(dir.path()), Err(Error::Schema(_))));

    let path = dir.path().join("optimizer.json");
    let text = fs::read_to_string(&path).unwrap().replace("\"format_version\": 1", "\"format_version\": 99");
    fs::write(&path, text).unwrap();
    let err = load_checkpoint::<PolicyParams>(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Version { found: 99, .. }), "{err}");
}

fn cfg(temperature: f64) -> SamplingConfig {
    SamplingConfig {
        temperature,
        max_new_tokens: 4,
        ..SamplingConfig::default()
    }
}

fn requests(p: &PolicyParams) -> Vec<GenerationRequest> {
    (0..6)
        .map(|i| {
            let (mut items, _) = random_sequence(&p.hyper, 50 + i);
            items.truncate(p.hyper.max_len - 4);
            GenerationRequest { prefix: items, seed: i }
        })
        .collect()
}

#[test]
fn inference_lifecycle() {
    let p = random_policy(10);
    for name in ["inprocess", "naive_f32"] {
        let mut e = inference_engine(name).unwrap();
        assert_eq!(e.name(), name);
        assert!(matches!(e.load(), Err(Error::Lifecycle(_))), "load before sync");
        e.sync_weights(&p).unwrap();
        assert!(!e.is_loaded());
        assert_eq!(e.resident_bytes(), 0);
        assert!(matches!(e.generate(&requests(&p), &cfg(1.0)), Err(Error::Lifecycle(_))));
        e.load().unwrap();
        assert!(e.resident_bytes() > 0);
        let before = e.generate(&requests(&p), &cfg(1.0)).unwrap();
        e.offload().unwrap();
        assert_eq!(e.resident_bytes(), 0);
        assert!(!e.is_loaded());
        assert!(matches!(e.generate(&requests(&p), &cfg(1.0)), Err(Error::Lifecycle(_))));
        e.load().unwrap();
        assert_eq!(e.generate(&requests(&p), &cfg(1.0)).unwrap(), before);
    }
    assert!(matches!(inference_engine("vllm"), Err(Error::Config(_))));
}

#[test]
fn sync_while_loaded_replaces_resident_weights() {
    let (p, q) = (random_policy(11), random_policy(12));
    let mut e = InProcessEngine::new();
    e.sync_weights(&p).unwrap();
    e.load().unwrap();
    e.sync_weights(&q).unwrap();
    let got = e.generate(&requests(&q), &cfg(0.0)).unwrap();
    let want: Vec<_> = requests(&q)
        .iter()
        .map(|r| sample(&q, &r.prefix, &cfg(0.0), &mut rng(r.seed)).unwrap())
        .collect();
    assert_eq!(got, want);
}

#[test]
fn inprocess_generation_is_the_policy_sampler() {
    use rand::SeedableRng;
    let p = random_policy(13);
    let mut e = InProcessEngine::new();
    e.sync_weights(&p).unwrap();
    e.load().unwrap();
    for t in [0.0, 1.0] {
        let got = e.generate(&requests(&p), &cfg(t)).unwrap();
        for (g, r) in got.iter().zip(requests(&p)) {
            let mut stream = rand_chacha::ChaCha8Rng::seed_from_u64(r.seed);
            assert_eq!(g, &sample(&p, &r.prefix, &cfg(t), &mut stream).unwrap());
        }
    }
}

#[test]
fn engines_are_interchangeable_within_tolerance() {
    for seed in 0..10 {
        let p = random_policy(100 + seed);
        let mut a = inference_engine("inprocess").unwrap();
        let mut b = inference_engine("naive_f32").unwrap();
        for e in [&mut a, &mut b] {
            e.sync_weights(&p).unwrap();
            e.load().unwrap();
        }
        let ga = a.generate(&requests(&p), &cfg(1.0)).unwrap();
        let gb = b.generate(&requests(&p), &cfg(1.0)).unwrap();
        for (x, y) in ga.iter().zip(&gb) {
            assert_eq!(x.tokens, y.tokens);
            assert_eq!(x.stop_reason, y.stop_reason);
            for (lx, ly) in x.logprobs.iter().zip(&y.logprobs) {
                assert!((lx - ly).abs() < 1e-5, "{lx} vs {ly}");
            }
        }
    }
}
