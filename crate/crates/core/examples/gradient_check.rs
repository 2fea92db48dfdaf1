//! Checks the hand-written backward pass of the policy against central
//! finite differences of a simple sequence log-likelihood.
//!
//! ```text
//! cargo run --release --example gradient_check
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rlforge::env::{generate_instances, EnvKind, EnvSpec};
use rlforge::policy::{grad, sequence_stats, ParamSet, PolicyParams, SequenceGrads, SequenceRef};
use rlforge::proto::{flatten_state, Segment};

fn main() -> rlforge::Result<()> {
    let spec = EnvSpec::default_for(EnvKind::GridCount);
    let vocab = spec.vocab();
    let inst = &generate_instances(&spec, 1, 0)?[0];
    let mut params = PolicyParams::init(spec.hyper(8, 4), 0)?;
    // Spread the weights so the gradients are far from zero.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..params.num_params() {
        params.set_flat(i, rng.gen_range(-0.5..0.5));
    }

    let state = rlforge::env::reset(inst, 0).extended([Segment::action(rlforge::env::answer_tokens(inst))]);
    let flat = flatten_state(&state, &vocab.placeholder_policy(spec.height, spec.width))?;
    let seq = SequenceRef {
        items: &flat.items,
        response_mask: &flat.response_mask,
    };
    let nll = |p: &PolicyParams| -> rlforge::Result<f64> {
        let s = sequence_stats(p, seq)?;
        Ok(-s.logprobs.iter().zip(&flat.response_mask).map(|(l, &m)| l * f64::from(m)).sum::<f64>())
    };
    let (loss, g) = grad(&params, &[seq], |stats| {
        let s = &stats[0];
        let mut d = SequenceGrads::zeros(s.logprobs.len());
        for (t, &m) in flat.response_mask.iter().enumerate() {
            d.d_logprobs[t] = -f64::from(m);
        }
        let loss = -s.logprobs.iter().zip(&flat.response_mask).map(|(l, &m)| l * f64::from(m)).sum::<f64>();
        Ok((loss, vec![d]))
    })?;
    println!("negative log-likelihood of the correct answer: {loss:.6}");

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut q = params.clone();
    for i in 0..params.num_params() {
        let x = q.get_flat(i);
        q.set_flat(i, x + h);
        let up = nll(&q)?;
        q.set_flat(i, x - h);
        let down = nll(&q)?;
        q.set_flat(i, x);
        let numeric = (up - down) / (2.0 * h);
        let analytic = g.get_flat(i);
        worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6));
    }
    println!("{} parameters, max relative error {worst:.2e}", params.num_params());
    for (name, t) in g.tensors() {
        let norm = t.data.iter().map(|x| x * x).sum::<f64>().sqrt();
        println!("  {name:<24} grad norm {norm:.4e}");
    }
    Ok(())
}
