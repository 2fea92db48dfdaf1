#![allow(dead_code)]

pub mod oracles;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rlforge::policy::{Hyper, ParamSet, PolicyParams};
use rlforge::proto::InputItem;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tiny_hyper() -> Hyper {
    Hyper {
        d_model: 8,
        d_visual: 4,
        vocab_size: 16,
        action_vocab: 12,
        num_cell_symbols: 4,
        max_len: 12,
        grid_height: 2,
        grid_width: 2,
    }
}

/// Random policy with every tensor (biases and value head included) filled.
pub fn random_params<P: ParamSet>(mut p: P, seed: u64, scale: f64) -> P {
    let mut r = rng(seed);
    for (_, t) in p.tensors_mut() {
        for x in t.data.iter_mut() {
            *x = r.gen_range(-scale..scale);
        }
    }
    p
}

pub fn random_policy(seed: u64) -> PolicyParams {
    random_params(
        PolicyParams::init(tiny_hyper(), seed).unwrap(),
        seed ^ 0xabcd,
        0.5,
    )
}

/// Random mixed sequence with a response mask over some action tokens.
pub fn random_sequence(h: &Hyper, seed: u64) -> (Vec<InputItem>, Vec<u8>) {
    let mut r = rng(seed);
    let len = r.gen_range(2..=h.max_len);
    let mut items = Vec::with_capacity(len);
    let mut mask = vec![0u8; len];
    for t in 0..len {
        if t > 0 && r.gen_bool(0.25) {
            items.push(InputItem::Cell {
                symbol: r.gen_range(0..h.num_cell_symbols as u32),
                row: r.gen_range(0..h.grid_height as u16),
                col: r.gen_range(0..h.grid_width as u16),
            });
        } else if t > 0 && r.gen_bool(0.6) {
            items.push(InputItem::Token(r.gen_range(0..h.action_vocab as u32)));
            mask[t] = 1;
        } else {
            items.push(InputItem::Token(r.gen_range(0..h.vocab_size as u32)));
        }
    }
    if mask.iter().all(|&m| m == 0) {
        items[len - 1] = InputItem::Token(0);
        mask[len - 1] = 1;
    }
    (items, mask)
}

/// Max relative error between an analytic gradient and central differences
/// of `f` over `probes` random coordinates.
pub fn fd_check<P: ParamSet>(
    params: &P,
    grad: &P,
    probes: usize,
    seed: u64,
    f: impl Fn(&P) -> f64,
) -> f64 {
    let h = 1e-5;
    let n = params.num_params();
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let i = r.gen_range(0..n);
        let mut p = params.clone();
        let x = p.get_flat(i);
        p.set_flat(i, x + h);
        let up = f(&p);
        p.set_flat(i, x - h);
        let down = f(&p);
        let numeric = (up - down) / (2.0 * h);
        let analytic = grad.get_flat(i);
        let denom = analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    worst
}

/// Plays scripted actions on `inst` and packages the episode; log-probs are
/// left at zero.
pub fn scripted(
    inst: &rlforge::env::TaskInstance,
    actions: &[Vec<u32>],
) -> rlforge::proto::Trajectory {
    use rlforge::env::{reset, step};
    use rlforge::proto::{flatten_state, Trajectory};
    let s0 = reset(inst, 0);
    let mut state = s0.clone();
    let mut turns = 0;
    for (i, a) in actions.iter().enumerate() {
        let (next, resp) = step(inst, &state, a, i + 1);
        state = next;
        turns = i + 1;
        if resp.done {
            break;
        }
    }
    let policy = inst
        .env
        .vocab()
        .placeholder_policy(inst.env.height, inst.env.width);
    let flat = flatten_state(&state, &policy).unwrap();
    Trajectory {
        initial_state: s0,
        final_state: state,
        sampled_logprobs: vec![0.0; flat.tokens.len()],
        flat_tokens: flat.tokens,
        response_mask: flat.response_mask,
        turn_count: turns,
        reward_components: Default::default(),
        total_reward: 0.0,
        group_id: 0,
        prompt_id: inst.id,
        rng_seed: 0,
        truncated: false,
        greedy_baseline: false,
    }
}

/// A config small enough for a test to train in well under a second per step.
pub fn small_config(overrides: &[&str]) -> rlforge::config::RunConfig {
    let mut all: Vec<String> = [
        "actor.d_model=8",
        "actor.d_visual=4",
        "critic.d_model=8",
        "critic.d_visual=4",
        "algorithm.group_size=2",
        "trainer.batch_size=2",
        "trainer.steps_per_iteration=1",
        "trainer.log_every=0",
        "data.train_size=16",
        "data.eval_size=8",
        // a random policy never answers correctly; the length term keeps gradients nonzero
        "reward.components=[accuracy,length_penalty]",
        "reward.weights=[1.0,1.0]",
        "reward.length_target=2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    all.extend(overrides.iter().map(|s| s.to_string()));
    rlforge::config::load_config(None, &all).unwrap()
}

/// First file that differs between two directory trees, if any.
pub fn tree_difference(a: &std::path::Path, b: &std::path::Path) -> Option<std::path::PathBuf> {
    let list = |d: &std::path::Path| {
        let mut v: Vec<_> = std::fs::read_dir(d)
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        v.sort();
        v
    };
    let names = list(a);
    if names != list(b) {
        return Some(a.to_path_buf());
    }
    names.into_iter().find_map(|n| {
        let (pa, pb) = (a.join(&n), b.join(&n));
        if pa.is_dir() {
            tree_difference(&pa, &pb)
        } else {
            (std::fs::read(&pa).unwrap() != std::fs::read(&pb).unwrap()).then_some(pa)
        }
    })
}

/// Recursively asserts two directories hold byte-identical files.
pub fn assert_same_tree(a: &std::path::Path, b: &std::path::Path) {
    if let Some(p) = tree_difference(a, b) {
        panic!("{p:?} differs between {a:?} and {b:?}");
    }
}
