//! Each built-in advantage estimator applied to the same reward group, and
//! GAE over a short episode.
//!
//! ```text
//! cargo run --release --example advantage_estimators
//! ```

use rlforge::algo::advantage::{gae, gpg, grpo, opo, reinforce_pp, remax, rloo};

fn show(name: &str, adv: &[f64]) {
    let cells: Vec<String> = adv.iter().map(|a| format!("{a:>7.3}")).collect();
    println!("{name:>13} {}", cells.join(" "));
}

fn main() -> rlforge::Result<()> {
    let rewards = [1.0, 0.0, 1.0, 0.0, 0.5];
    let lengths = [2, 6, 3, 1, 4];
    let greedy = [0.5; 5];
    show("rewards", &rewards);
    show("grpo", &grpo(&rewards, true, 1e-6));
    show("grpo (no std)", &grpo(&rewards, false, 1e-6));
    show("rloo", &rloo(&rewards)?);
    show("opo", &opo(&rewards, &lengths));
    show("gpg", &gpg(&rewards));
    show("reinforce_pp", &reinforce_pp(&rewards, 1e-6));
    show("remax", &remax(&rewards, &greedy));

    let step_rewards = [0.0, 0.0, 0.0, 1.0];
    let values = [0.2, 0.4, 0.6, 0.8];
    for (gamma, lam) in [(1.0, 1.0), (1.0, 0.95), (0.9, 0.9)] {
        let (adv, ret) = gae(&step_rewards, &values, gamma, lam);
        show(&format!("gae {gamma}/{lam}"), &adv);
        show("returns", &ret);
    }
    Ok(())
}
