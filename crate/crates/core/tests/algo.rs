mod common;

use std::sync::Arc;

use common::oracles::*;
use common::{fd_check, random_policy, random_sequence, rng};
use proptest::prelude::*;
use rand::Rng;
use rlforge::algo::advantage::{gae, gpg, grpo, opo, reinforce_pp, rloo};
use rlforge::algo::*;
use rlforge::policy::{grad, sequence_stats, SequenceGrads, SequenceRef};
use rlforge::proto::{field, TrajectoryBatch};
use rlforge::Error;

#[test]
fn estimators_match_oracles_on_many_groups() {
    let mut g = rng(7);
    for _ in 0..1000 {
        let k = g.gen_range(2..9);
        let r: Vec<f64> = (0..k).map(|_| g.gen_range(-3.0..3.0)).collect();
        let l: Vec<usize> = (0..k).map(|_| g.gen_range(1..12)).collect();
        assert!(close(&grpo(&r, true, 1e-6), &oracle_grpo(&r, 1e-6), 1e-9));
        assert!(close(&rloo(&r).unwrap(), &oracle_rloo(&r), 1e-9));
        assert!(close(&opo(&r, &l), &oracle_opo(&r, &l), 1e-9));
        let m = r.iter().sum::<f64>() / k as f64;
        assert!(close(&gpg(&r), &r.iter().map(|x| x - m).collect::<Vec<_>>(), 1e-12));
    }
}

#[test]
fn estimator_examples_through_batches() {
    let reg = Registry::with_builtins();
    let mut b = reward_batch(&[vec![1.0, 0.0, 1.0, 0.0]], &[vec![1, 2, 3, 1]]);
    let mut c = cfg("grpo", 4);
    c.std_eps = 1e-12;
    estimate_advantages(&mut b, &c, &reg).unwrap();
    let adv: Vec<f64> = (0..4).map(|r| row_advantage(&b, r)).collect();
    assert!(close(&adv, &[1.0, -1.0, 1.0, -1.0], 1e-9));
    // Broadcast onto every response token, zero elsewhere.
    assert_eq!(b.row(field::ADVANTAGES, 2).unwrap(), &[0.0, 0.0, adv[2], adv[2], adv[2]]);

    let mut b = reward_batch(&[vec![3.0, 0.0, 0.0]], &[vec![1, 1, 1]]);
    estimate_advantages(&mut b, &cfg("rloo", 3), &reg).unwrap();
    let adv: Vec<f64> = (0..3).map(|r| row_advantage(&b, r)).collect();
    assert!(close(&adv, &[3.0, -1.5, -1.5], 1e-12));

    let mut b = reward_batch(&[vec![1.0, 0.0]], &[vec![2, 6]]);
    estimate_advantages(&mut b, &cfg("opo", 2), &reg).unwrap();
    assert!(close(&[row_advantage(&b, 0), row_advantage(&b, 1)], &[0.75, -0.25], 1e-12));

    let mut b = reward_batch(&[vec![1.0; 4]], &[vec![1; 4]]);
    estimate_advantages(&mut b, &cfg("grpo", 4), &reg).unwrap();
    assert!(b.data(field::ADVANTAGES).unwrap().iter().all(|&a| a == 0.0));
}

#[test]
fn reinforce_pp_normalises_across_the_batch() {
    let reg = Registry::with_builtins();
    let rewards = vec![vec![1.0, 1.0], vec![0.0, 0.0]];
    let mut b = reward_batch(&rewards, &[vec![1, 1], vec![1, 1]]);
    estimate_advantages(&mut b, &cfg("reinforce_pp", 2), &reg).unwrap();
    let adv: Vec<f64> = (0..4).map(|r| row_advantage(&b, r)).collect();
    assert!(close(&adv, &reinforce_pp(&[1.0, 1.0, 0.0, 0.0], 1e-6), 0.0));
    assert!(adv[0] > 0.99 && adv[3] < -0.99, "per-group normalisation would give zeros");
}

#[test]
fn remax_uses_greedy_rewards() {
    let reg = Registry::with_builtins();
    let mut b = reward_batch(&[vec![0.3, 1.0]], &[vec![1, 1]]);
    assert!(matches!(
        estimate_advantages(&mut b, &cfg("remax", 2), &reg),
        Err(Error::MissingField(_))
    ));
    b.set_row_values(field::GREEDY_REWARD, vec![0.3, 1.0]).unwrap();
    estimate_advantages(&mut b, &cfg("remax", 2), &reg).unwrap();
    assert!(b.data(field::ADVANTAGES).unwrap().iter().all(|&a| a == 0.0));
    b.set_row_values(field::GREEDY_REWARD, vec![0.0, 0.0]).unwrap();
    estimate_advantages(&mut b, &cfg("remax", 2), &reg).unwrap();
    assert_eq!(row_advantage(&b, 1), 1.0);
}

#[test]
fn gae_example_and_batch_path() {
    let (a, _) = gae(&[0.0, 0.0, 1.0], &[0.5; 3], 1.0, 1.0);
    assert!(close(&a, &[0.5; 3], 1e-12));

    let reg = Registry::with_builtins();
    let mut b = reward_batch(&[vec![1.0]], &[vec![3]]);
    assert!(matches!(
        estimate_advantages(&mut b, &cfg("gae", 1), &reg),
        Err(Error::MissingField(_))
    ));
    b.set_field(field::VALUES, 0.0, vec![0.0, 0.0, 0.5, 0.5, 0.5]).unwrap();
    estimate_advantages(&mut b, &cfg("gae", 1), &reg).unwrap();
    assert!(close(b.data(field::ADVANTAGES).unwrap(), &[0.0, 0.0, 0.5, 0.5, 0.5], 1e-12));
    assert!(close(b.data(field::RETURNS).unwrap(), &[0.0, 0.0, 1.0, 1.0, 1.0], 1e-12));
}

#[test]
fn malformed_groups_are_rejected() {
    let reg = Registry::with_builtins();
    for name in ["grpo", "rloo", "opo", "gpg"] {
        let mut b = reward_batch(&[vec![1.0, 0.0, 1.0]], &[vec![1, 1, 1]]);
        let err = estimate_advantages(&mut b, &cfg(name, 2), &reg).unwrap_err();
        assert!(matches!(err, Error::Grouping(_)), "{name}: {err}");
    }
    let mut b = reward_batch(&[vec![1.0], vec![0.0], vec![1.0]], &[vec![1], vec![1], vec![1]]);
    b.group_ids = vec![0, 1, 0];
    assert!(matches!(
        estimate_advantages(&mut b, &cfg("gpg", 1), &reg),
        Ok(())
    ));
    assert!(matches!(
        estimate_advantages(&mut b, &cfg("gpg", 2), &reg),
        Err(Error::Grouping(_))
    ));
}

#[test]
fn group_size_one_gives_zero_advantages() {
    let reg = Registry::with_builtins();
    let mut b = reward_batch(&[vec![1.0], vec![0.5]], &[vec![2], vec![1]]);
    estimate_advantages(&mut b, &cfg("grpo", 1), &reg).unwrap();
    assert!(b.data(field::ADVANTAGES).unwrap().iter().all(|&a| a == 0.0));
}

proptest! {
    #[test]
    fn group_invariants(
        groups in prop::collection::vec(prop::collection::vec((-5.0f64..5.0, 1usize..6), 4), 1..6),
        shift in -10.0f64..10.0,
        scale in 0.1f64..10.0,
    ) {
        let reg = Registry::with_builtins();
        let rewards: Vec<Vec<f64>> = groups.iter().map(|g| g.iter().map(|x| x.0).collect()).collect();
        let lengths: Vec<Vec<usize>> = groups.iter().map(|g| g.iter().map(|x| x.1).collect()).collect();
        let run = |name: &str, rw: &[Vec<f64>], ls: &[Vec<usize>]| {
            let mut b = reward_batch(rw, ls);
            estimate_advantages(&mut b, &cfg(name, 4), &reg).unwrap();
            (0..b.rows()).map(|r| row_advantage(&b, r)).collect::<Vec<f64>>()
        };
        let grpo_adv = run("grpo", &rewards, &lengths);
        for (gi, g) in grpo_adv.chunks(4).enumerate() {
            let m = g.iter().sum::<f64>() / 4.0;
            prop_assert!(m.abs() < 1e-9);
            let r = &rewards[gi];
            let rm = r.iter().sum::<f64>() / 4.0;
            let rs = (r.iter().map(|x| (x - rm).powi(2)).sum::<f64>() / 4.0).sqrt();
            if rs > 1e-3 {
                let s = (g.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 4.0).sqrt();
                prop_assert!((s - 1.0).abs() < 1e-5, "std {}", s);
            }
        }
        for g in run("rloo", &rewards, &lengths).chunks(4) {
            prop_assert!(g.iter().sum::<f64>().abs() < 1e-9);
        }
        let equal: Vec<Vec<usize>> = lengths.iter().map(|l| vec![l[0]; 4]).collect();
        prop_assert_eq!(run("opo", &rewards, &equal), run("gpg", &rewards, &equal));

        let shifted: Vec<Vec<f64>> = rewards.iter().map(|g| g.iter().map(|x| x + shift).collect()).collect();
        let scaled: Vec<Vec<f64>> = rewards.iter().map(|g| g.iter().map(|x| x * scale).collect()).collect();
        for name in ["grpo", "rloo", "opo", "gpg"] {
            let base = run(name, &rewards, &lengths);
            prop_assert!(close(&run(name, &shifted, &lengths), &base, 1e-6), "{} shift", name);
            let sc = run(name, &scaled, &lengths);
            if name == "grpo" {
                let stds_ok = rewards.iter().all(|r| {
                    let m = r.iter().sum::<f64>() / 4.0;
                    (r.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 4.0).sqrt() > 1e-2
                });
                if stds_ok {
                    prop_assert!(close(&sc, &base, 1e-4), "grpo scale");
                }
            } else {
                let expected: Vec<f64> = base.iter().map(|a| a * scale).collect();
                prop_assert!(close(&sc, &expected, 1e-9), "{} scale", name);
            }
        }
    }

    #[test]
    fn gae_matches_quadratic_sum(
        steps in prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0), 1..20),
        gamma in 0.0f64..=1.0, lam in 0.0f64..=1.0,
    ) {
        let r: Vec<f64> = steps.iter().map(|s| s.0).collect();
        let v: Vec<f64> = steps.iter().map(|s| s.1).collect();
        let (a, ret) = gae(&r, &v, gamma, lam);
        prop_assert!(close(&a, &oracle_gae(&r, &v, gamma, lam), 1e-9));
        for t in 0..r.len() {
            prop_assert!((ret[t] - a[t] - v[t]).abs() < 1e-12);
        }
    }
}

// ----- policy losses -----

struct LossCase {
    new: Vec<f64>,
    old: Vec<f64>,
    adv: Vec<f64>,
    mask: Vec<f64>,
    width: usize,
}

fn random_case(seed: u64, rows: usize, width: usize, spread: f64) -> LossCase {
    let mut g = rng(seed);
    let n = rows * width;
    let mut mask: Vec<f64> = (0..n).map(|_| f64::from(u8::from(g.gen_bool(0.7)))).collect();
    for r in 0..rows {
        mask[r * width] = 1.0;
    }
    let old: Vec<f64> = (0..n).map(|_| g.gen_range(-3.0..-0.05)).collect();
    let new = old.iter().map(|o| o + g.gen_range(-spread..spread)).collect();
    let mut adv = vec![0.0; n];
    for r in 0..rows {
        let a = g.gen_range(-2.0..2.0);
        for t in 0..width {
            adv[r * width + t] = a + g.gen_range(-0.3..0.3);
        }
    }
    LossCase { new, old, adv, mask, width }
}

fn eval_loss(reg: &Registry, c: &AlgoConfig, case: &LossCase, new: &[f64]) -> (f64, LossOutput) {
    policy_loss(reg, c, new, &case.old, &case.adv, &case.mask, case.width).unwrap()
}

fn loss_cfg(name: &str) -> AlgoConfig {
    AlgoConfig {
        policy_loss: name.into(),
        cov: CovConfig { fraction: 0.2, kl_weight: 0.5 },
        ..AlgoConfig::default()
    }
}

const LOSSES: [&str; 9] = ["vanilla", "ppo", "ppo_literal", "dapo", "gspo", "geo_mean", "gpg", "clip_cov", "kl_cov"];

#[test]
fn loss_gradients_match_finite_differences() {
    let reg = Registry::with_builtins();
    for name in LOSSES {
        for mode in [AggMode::TokenMean, AggMode::SeqMeanTokenMean, AggMode::SeqMeanTokenSum] {
            for seed in 0..20 {
                let case = random_case(seed, 3, 5, 0.5);
                let mut c = loss_cfg(name);
                c.agg_mode = mode;
                let (_, out) = eval_loss(&reg, &c, &case, &case.new);
                let h = 1e-6;
                for i in 0..case.new.len() {
                    let mut up = case.new.clone();
                    up[i] += h;
                    let mut down = case.new.clone();
                    down[i] -= h;
                    let numeric = (eval_loss(&reg, &c, &case, &down).0 - eval_loss(&reg, &c, &case, &up).0) / (2.0 * h);
                    let analytic = out.d_new[i];
                    assert!(
                        (numeric - analytic).abs() < 1e-6 * (1.0 + analytic.abs()),
                        "{name} {mode:?} seed {seed} pos {i}: {analytic} vs {numeric}"
                    );
                }
            }
        }
    }
}

#[test]
fn ppo_examples() {
    let reg = Registry::with_builtins();
    let c = loss_cfg("ppo");
    let old = [0.0, 0.0];
    let new = [1.5f64.ln(), 1.5f64.ln()];
    let (_, out) = policy_loss(&reg, &c, &new, &old, &[1.0, -1.0], &[1.0, 0.0], 2).unwrap();
    assert!((out.objective - 1.2).abs() < 1e-12);
    assert_eq!(out.clip_fraction, 1.0);
    let (_, out) = policy_loss(&reg, &c, &new, &old, &[-1.0, 0.0], &[1.0, 0.0], 2).unwrap();
    assert!((out.objective + 1.5).abs() < 1e-12);
    assert_eq!(out.clip_fraction, 0.0);
    // The literal form caps the ratio for negative advantages too.
    let (_, lit) = policy_loss(&reg, &loss_cfg("ppo_literal"), &new, &old, &[-1.0, 0.0], &[1.0, 0.0], 2).unwrap();
    assert!((lit.objective + 1.2).abs() < 1e-12);
}

#[test]
fn gspo_sequence_ratio_example() {
    let reg = Registry::with_builtins();
    let c = loss_cfg("gspo");
    let new = [0.6931 / 2.0, 0.6931 / 2.0];
    let (_, out) = policy_loss(&reg, &c, &new, &[0.0, 0.0], &[0.0, 0.0], &[1.0, 1.0], 2).unwrap();
    assert!((out.mean_ratio - 1.4142).abs() < 1e-4);
}

#[test]
fn on_policy_losses_coincide() {
    let reg = Registry::with_builtins();
    for seed in 0..50 {
        let mut case = random_case(seed, 4, 6, 0.1);
        case.new = case.old.clone();
        let (v, _) = eval_loss(&reg, &loss_cfg("vanilla"), &case, &case.new);
        for name in ["ppo", "dapo"] {
            let mut c = loss_cfg(name);
            c.agg_mode = AggMode::TokenMean;
            let (l, out) = eval_loss(&reg, &c, &case, &case.new);
            assert!((l - v).abs() < 1e-12, "{name}");
            assert_eq!(out.clip_fraction, 0.0);
            assert!((out.mean_ratio - 1.0).abs() < 1e-15);
        }
    }
}

#[test]
fn ppo_gradient_is_gated_outside_the_trust_region() {
    let reg = Registry::with_builtins();
    let c = loss_cfg("ppo");
    let r: [f64; 4] = [1.5, 0.5, 1.1, 0.9];
    let a = [1.0, -1.0, 1.0, -1.0];
    let new: Vec<f64> = r.iter().map(|x| x.ln()).collect();
    let (_, out) = policy_loss(&reg, &c, &new, &[0.0; 4], &a, &[1.0; 4], 4).unwrap();
    assert_eq!(out.d_new[0], 0.0);
    assert_eq!(out.d_new[1], 0.0);
    assert!(out.d_new[2] != 0.0 && out.d_new[3] != 0.0);
    assert_eq!(out.clip_fraction, 0.5);
}

#[test]
fn clip_cov_drops_top_covariance_tokens() {
    let reg = Registry::with_builtins();
    let mut c = loss_cfg("clip_cov");
    c.cov.fraction = 0.25;
    // Covariance statistic is largest at position 0 (high logprob, high advantage).
    let new = [-0.1, -2.0, -1.0, -1.5];
    let adv = [2.0, 0.0, 0.5, 0.1];
    let (_, out) = policy_loss(&reg, &c, &new, &new, &adv, &[1.0; 4], 4).unwrap();
    assert_eq!(out.d_new[0], 0.0);
    assert!(out.d_new[1..].iter().all(|&d| d != 0.0 || adv[1] == 0.0));
    let (_, ppo) = policy_loss(&reg, &loss_cfg("ppo"), &new, &new, &adv, &[1.0; 4], 4).unwrap();
    assert!((ppo.objective - out.objective - 0.25 * 2.0).abs() < 1e-12);
}

#[test]
fn non_finite_ratio_names_the_row() {
    let reg = Registry::with_builtins();
    let err = policy_loss(&reg, &loss_cfg("ppo"), &[0.0, 0.0, 800.0, 0.0], &[0.0; 4], &[1.0; 4], &[1.0; 4], 2).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)));
    assert!(err.to_string().contains("row 1"), "{err}");
}

// ----- KL and aggregation -----

#[test]
fn kl_examples_and_sweep() {
    let new = 2f64.ln();
    assert!((kl_value(KlEstimator::K3, new, 0.0) - 0.1931).abs() < 1e-4);
    let mut g = rng(3);
    for _ in 0..1_000_000 {
        let (n, r) = (g.gen_range(-20.0..0.0), g.gen_range(-20.0..0.0));
        assert!(kl_value(KlEstimator::K2, n, r) >= 0.0);
        assert!(kl_value(KlEstimator::K3, n, r) >= 0.0);
    }
    for e in [KlEstimator::K1, KlEstimator::K2, KlEstimator::K3] {
        assert_eq!(kl_value(e, -0.7, -0.7), 0.0);
    }
    assert!(kl_value(KlEstimator::K2, -0.7, -0.7 + 1e-7) > 0.0);
    assert!(kl_value(KlEstimator::K3, -0.7, -0.7 - 1e-4) > 0.0);
    assert_eq!(kl_penalty(&[-1.0, -2.0], &[0.0, 0.0], &[1.0, 0.0], KlEstimator::K1), vec![-1.0, 0.0]);
}

#[test]
fn kl_gradients_match_finite_differences() {
    let mut g = rng(5);
    for e in [KlEstimator::K1, KlEstimator::K2, KlEstimator::K3] {
        for _ in 0..100 {
            let (n, r) = (g.gen_range(-4.0..0.0), g.gen_range(-4.0..0.0));
            let h = 1e-6;
            let num = (kl_value(e, n + h, r) - kl_value(e, n - h, r)) / (2.0 * h);
            assert!((num - kl_grad(e, n, r)).abs() < 1e-6);
        }
    }
}

#[test]
fn aggregation_examples() {
    let values = [2.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
    let mask = [1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
    assert_eq!(aggregate(&values, &mask, 4, AggMode::SeqMeanTokenSum).unwrap(), 3.0);
    assert!((aggregate(&values, &mask, 4, AggMode::TokenMean).unwrap() - 1.2).abs() < 1e-15);

    let v = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let m = [1.0; 6];
    let tm = aggregate(&v, &m, 3, AggMode::TokenMean).unwrap();
    assert!((tm - aggregate(&v, &m, 3, AggMode::SeqMeanTokenMean).unwrap()).abs() < 1e-15);

    let row = [1.0, 2.0, 4.0, 9.0];
    let rm = [1.0, 1.0, 1.0, 0.0];
    let tm = aggregate(&row, &rm, 4, AggMode::TokenMean).unwrap();
    let smm = aggregate(&row, &rm, 4, AggMode::SeqMeanTokenMean).unwrap();
    let sms = aggregate(&row, &rm, 4, AggMode::SeqMeanTokenSum).unwrap();
    assert_eq!(tm, smm);
    assert!((sms - 3.0 * tm).abs() < 1e-15);
    assert!(matches!(aggregate(&[1.0], &[0.0], 1, AggMode::TokenMean), Err(Error::Degenerate(_))));
}

// ----- total objective -----

fn objective_case(seed: u64) -> (LossCase, Vec<f64>, Vec<f64>) {
    let case = random_case(seed, 3, 4, 0.3);
    let mut g = rng(seed + 100);
    let reference = case.old.iter().map(|o| o + g.gen_range(-0.5..0.5)).collect();
    let ent = (0..case.mask.len()).map(|_| g.gen_range(0.0..2.0)).collect();
    (case, reference, ent)
}

fn objective(case: &LossCase, reference: Option<&[f64]>, ent: &[f64], c: &AlgoConfig) -> rlforge::Result<ObjectiveOutput> {
    total_objective(
        ObjectiveInput {
            new_logprobs: &case.new,
            old_logprobs: &case.old,
            ref_logprobs: reference,
            entropies: ent,
            advantages: &case.adv,
            mask: &case.mask,
            width: case.width,
        },
        c,
        &Registry::with_builtins(),
    )
}

#[test]
fn objective_reductions() {
    let reg = Registry::with_builtins();
    let (case, reference, ent) = objective_case(1);
    let c = loss_cfg("ppo");
    let out = objective(&case, Some(&reference), &ent, &c).unwrap();
    let (pl, _) = eval_loss(&reg, &c, &case, &case.new);
    assert_eq!(out.loss, pl);

    let mut on = LossCase { new: case.old.clone(), adv: vec![0.0; case.adv.len()], ..case };
    on.new = on.old.clone();
    let mut c = loss_cfg("ppo");
    c.kl.beta_kl = 0.3;
    c.entropy_beta = 0.05;
    let out = objective(&on, Some(&reference), &ent, &c).unwrap();
    let kl = aggregate(&kl_penalty(&on.new, &reference, &on.mask, KlEstimator::K3), &on.mask, on.width, AggMode::TokenMean).unwrap();
    let h = aggregate(&ent, &on.mask, on.width, AggMode::TokenMean).unwrap();
    assert!((out.loss - (0.3 * kl - 0.05 * h)).abs() < 1e-12);
    assert!(out.stats.kl_mean.unwrap() > 0.0);

    assert!(matches!(objective(&on, None, &ent, &c), Err(Error::MissingField(_))));
    c.kl.beta_kl = 0.0;
    assert_eq!(objective(&on, None, &ent, &c).unwrap().stats.kl_mean, None);
}

#[test]
fn full_objective_gradient_through_the_model() {
    for seed in 0..10 {
        let p = random_policy(seed + 300);
        let seqs: Vec<_> = (0..3).map(|i| random_sequence(&p.hyper, seed * 10 + i)).collect();
        let width = seqs.iter().map(|s| s.0.len()).max().unwrap();
        let mut mask = vec![0.0; 3 * width];
        for (r, s) in seqs.iter().enumerate() {
            for (t, &m) in s.1.iter().enumerate() {
                mask[r * width + t] = f64::from(m);
            }
        }
        let mut g = rng(seed);
        let old: Vec<f64> = (0..mask.len()).map(|_| g.gen_range(-3.0..-0.5)).collect();
        let reference: Vec<f64> = (0..mask.len()).map(|_| g.gen_range(-3.0..-0.5)).collect();
        let adv: Vec<f64> = (0..mask.len()).map(|_| g.gen_range(-1.0..1.0)).collect();
        let mut c = loss_cfg("ppo");
        c.clip.eps = 10.0; // keep every term in its smooth branch
        c.kl.beta_kl = 0.2;
        c.entropy_beta = 0.1;
        c.agg_mode = AggMode::SeqMeanTokenMean;
        let reg = Registry::with_builtins();
        let refs: Vec<SequenceRef<'_>> = seqs
            .iter()
            .map(|(items, m)| SequenceRef { items, response_mask: m })
            .collect();
        let fields = |stats: &[rlforge::policy::SequenceStats]| {
            let mut new = vec![0.0; mask.len()];
            let mut ent = vec![0.0; mask.len()];
            for (r, s) in stats.iter().enumerate() {
                new[r * width..r * width + s.logprobs.len()].copy_from_slice(&s.logprobs);
                ent[r * width..r * width + s.entropies.len()].copy_from_slice(&s.entropies);
            }
            (new, ent)
        };
        let run = |new: &[f64], ent: &[f64]| {
            total_objective(
                ObjectiveInput {
                    new_logprobs: new,
                    old_logprobs: &old,
                    ref_logprobs: Some(&reference),
                    entropies: ent,
                    advantages: &adv,
                    mask: &mask,
                    width,
                },
                &c,
                &reg,
            )
            .unwrap()
        };
        let (_, grads) = grad(&p, &refs, |stats| {
            let (new, ent) = fields(stats);
            let out = run(&new, &ent);
            let gr = stats
                .iter()
                .enumerate()
                .map(|(r, s)| {
                    let n = s.logprobs.len();
                    let mut sg = SequenceGrads::zeros(n);
                    sg.d_logprobs.copy_from_slice(&out.d_new[r * width..r * width + n]);
                    sg.d_entropies.copy_from_slice(&out.d_entropy[r * width..r * width + n]);
                    sg
                })
                .collect();
            Ok((out.loss, gr))
        })
        .unwrap();
        let err = fd_check(&p, &grads, 40, seed, |q| {
            let stats: Vec<_> = refs.iter().map(|s| sequence_stats(q, *s).unwrap()).collect();
            let (new, ent) = fields(&stats);
            run(&new, &ent).loss
        });
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
    }
}

// ----- registry -----

#[test]
fn registry_rules() {
    let mut reg = Registry::with_builtins();
    let dup = reg.register_adv_estimator("grpo", reg.estimator("gpg").unwrap().func.clone());
    assert!(matches!(dup, Err(Error::Registration(_))));
    let dup = reg.register_policy_loss("ppo", reg.policy_loss("vanilla").unwrap().func.clone());
    assert!(matches!(dup, Err(Error::Registration(_))));

    let err = cfg("nope", 2).validate(&reg).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Config(_)));
    for name in ["grpo", "rloo", "remax", "opo", "gpg", "reinforce_pp", "gae"] {
        assert!(msg.contains(name), "{msg}");
    }
    assert!(reg.estimator("GRPO").is_err(), "lookups are exact-match");

    let f: AdvantageFn = Arc::new(|b: &TrajectoryBatch, _: &AlgoConfig| {
        let per_row = vec![7.0; b.rows()];
        Ok(AdvantageOutput { advantages: broadcast_rows(b, &per_row)?, returns: None })
    });
    reg.register_adv_estimator("my_adv", f).unwrap();
    let mut b = reward_batch(&[vec![1.0, 0.0]], &[vec![1, 2]]);
    estimate_advantages(&mut b, &cfg("my_adv", 2), &reg).unwrap();
    assert_eq!(row_advantage(&b, 1), 7.0);

    let l: PolicyLossFn = Arc::new(|i: &LossInput<'_>| {
        Ok(LossOutput { objective: 42.0, d_new: vec![0.0; i.mask.len()], clip_fraction: 0.0, mean_ratio: 1.0 })
    });
    reg.register_policy_loss("const", l).unwrap();
    let (loss, _) = policy_loss(&reg, &loss_cfg("const"), &[0.0], &[0.0], &[0.0], &[1.0], 1).unwrap();
    assert_eq!(loss, -42.0);
}

#[test]
fn config_validation_ranges() {
    let reg = Registry::with_builtins();
    assert!(AlgoConfig::default().validate(&reg).is_ok());
    let bad: Vec<Box<dyn Fn(&mut AlgoConfig)>> = vec![
        Box::new(|c| c.kl.beta_kl = -0.1),
        Box::new(|c| c.entropy_beta = -1.0),
        Box::new(|c| c.clip.eps = 0.0),
        Box::new(|c| c.gamma = 1.5),
        Box::new(|c| c.lam = -0.1),
        Box::new(|c| c.group_size = 0),
        Box::new(|c| c.std_eps = 0.0),
        Box::new(|c| c.cov.fraction = 1.0),
        Box::new(|c| c.policy_loss = "nope".into()),
    ];
    for (i, f) in bad.iter().enumerate() {
        let mut c = AlgoConfig::default();
        f(&mut c);
        assert!(c.validate(&reg).is_err(), "case {i}");
    }
}
