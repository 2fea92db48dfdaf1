//! Batch builders and brute-force advantage oracles shared by the estimator
//! tests and the acceptance suite.

use rlforge::algo::AlgoConfig;
use rlforge::proto::{field, flatten_state, make_batch, PlaceholderPolicy, Segment, State, Trajectory, TrajectoryBatch};

pub fn ph() -> PlaceholderPolicy {
    PlaceholderPolicy {
        obs_start: 20,
        obs_end: 21,
        placeholder: 22,
        max_height: 2,
        max_width: 2,
    }
}

pub fn traj(response: usize, group: u64) -> Trajectory {
    let s0 = State::new(vec![Segment::prompt(vec![1, 2])]);
    let s1 = s0.extended([Segment::action(vec![3; response])]);
    let flat = flatten_state(&s1, &ph()).unwrap();
    Trajectory {
        initial_state: s0,
        final_state: s1,
        sampled_logprobs: vec![0.0; flat.tokens.len()],
        flat_tokens: flat.tokens,
        response_mask: flat.response_mask,
        turn_count: 1,
        reward_components: Default::default(),
        total_reward: 0.0,
        group_id: group,
        prompt_id: group,
        rng_seed: 0,
        truncated: false,
        greedy_baseline: false,
    }
}

/// Batch of groups with the scalar reward on each row's last response token.
pub fn reward_batch(rewards: &[Vec<f64>], lengths: &[Vec<usize>]) -> TrajectoryBatch {
    let mut trajs = Vec::new();
    for (g, ls) in lengths.iter().enumerate() {
        trajs.extend(ls.iter().map(|&l| traj(l, g as u64)));
    }
    let mut b = make_batch(&trajs, 0).unwrap();
    let w = b.max_len();
    let mut dense = vec![0.0; b.rows() * w];
    for (r, reward) in rewards.iter().flatten().enumerate() {
        dense[r * w + b.last_response_position(r).unwrap()] = *reward;
    }
    b.set_field(field::REWARDS, 0.0, dense).unwrap();
    b
}

pub fn row_advantage(b: &TrajectoryBatch, r: usize) -> f64 {
    b.row(field::ADVANTAGES, r).unwrap()[b.last_response_position(r).unwrap()]
}

pub fn cfg(estimator: &str, k: usize) -> AlgoConfig {
    AlgoConfig {
        adv_estimator: estimator.into(),
        group_size: k,
        ..AlgoConfig::default()
    }
}

pub fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

// Independent oracles: textbook loops written without the library helpers.
pub fn oracle_grpo(r: &[f64], eps: f64) -> Vec<f64> {
    let k = r.len() as f64;
    let mut m = 0.0;
    for x in r {
        m += x / k;
    }
    let mut var = 0.0;
    for x in r {
        var += (x - m).powi(2) / k;
    }
    r.iter().map(|x| (x - m) / (var.sqrt() + eps)).collect()
}

pub fn oracle_rloo(r: &[f64]) -> Vec<f64> {
    (0..r.len())
        .map(|i| {
            let others: Vec<f64> = (0..r.len()).filter(|&j| j != i).map(|j| r[j]).collect();
            r[i] - others.iter().sum::<f64>() / others.len() as f64
        })
        .collect()
}

pub fn oracle_opo(r: &[f64], l: &[usize]) -> Vec<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, &n) in r.iter().zip(l) {
        for _ in 0..n {
            num += x;
            den += 1.0;
        }
    }
    r.iter().map(|x| x - num / den).collect()
}

pub fn oracle_gae(r: &[f64], v: &[f64], gamma: f64, lam: f64) -> Vec<f64> {
    let n = r.len();
    let delta: Vec<f64> = (0..n)
        .map(|t| r[t] + gamma * if t + 1 < n { v[t + 1] } else { 0.0 } - v[t])
        .collect();
    (0..n)
        .map(|t| (t..n).map(|l| (gamma * lam).powi((l - t) as i32) * delta[l]).sum())
        .collect()
}

pub fn oracle_gpg(r: &[f64]) -> Vec<f64> {
    let mut m = 0.0;
    for x in r {
        m += x;
    }
    m /= r.len() as f64;
    r.iter().map(|x| x - m).collect()
}

/// Batch-wide normalisation: the whole batch is one pool.
pub fn oracle_reinforce_pp(r: &[f64], eps: f64) -> Vec<f64> {
    oracle_grpo(r, eps)
}

pub fn oracle_remax(r: &[f64], greedy: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    for i in 0..r.len() {
        out.push(r[i] - greedy[i]);
    }
    out
}
