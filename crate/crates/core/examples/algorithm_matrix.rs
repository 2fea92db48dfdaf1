//! Every advantage estimator paired with every policy loss for a few
//! training steps; prints the final policy loss of each pair.
//!
//! ```text
//! cargo run --release --example algorithm_matrix -- [steps]
//! ```

use rlforge::algo::Registry;
use rlforge::config::load_config;
use rlforge::pipeline::Trainer;

fn main() -> rlforge::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let registry = Registry::with_builtins();
    let estimators = registry.estimator_names();
    let losses = registry.policy_loss_names();

    print!("{:>13}", "");
    for l in &losses {
        print!(" {l:>11}");
    }
    println!();
    for e in &estimators {
        print!("{e:>13}");
        for l in &losses {
            let cfg = load_config(
                None,
                &[
                    format!("algorithm.adv_estimator={e}"),
                    format!("algorithm.policy_loss={l}"),
                    "algorithm.group_size=4".into(),
                    "actor.d_model=16".into(),
                    "actor.d_visual=8".into(),
                    "critic.d_model=16".into(),
                    "critic.d_visual=8".into(),
                    "trainer.batch_size=4".into(),
                    format!("trainer.steps_per_iteration={steps}"),
                    "trainer.log_every=0".into(),
                ],
            )?;
            let cell = match Trainer::new(cfg, registry.clone()).and_then(|mut t| t.run()) {
                Ok(s) => format!("{:.4}", s.history.last().map_or(f64::NAN, |m| m.policy_loss)),
                Err(e) => format!("error: {e}"),
            };
            print!(" {cell:>11}");
        }
        println!();
    }
    Ok(())
}
