//! Trains a policy on the grid counting task with GRPO and reports the
//! learning curve and a greedy evaluation.
//!
//! ```text
//! cargo run --release --example grid_count_grpo -- [steps] [out_dir]
//! ```

use std::path::PathBuf;

use rlforge::algo::Registry;
use rlforge::config::load_config;
use rlforge::pipeline::{write_plot_data, Trainer};

fn main() -> rlforge::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("rlforge_grid_count_grpo"));

    let overrides: Vec<String> = [
        "data.env=grid_count".to_string(),
        "algorithm.adv_estimator=grpo".into(),
        "algorithm.policy_loss=ppo".into(),
        "algorithm.group_size=8".into(),
        "trainer.batch_size=16".into(),
        format!("trainer.steps_per_iteration={steps}"),
        format!("trainer.eval_every={}", (steps / 4).max(1)),
        "trainer.log_every=0".into(),
    ]
    .into();
    let cfg = load_config(None, &overrides)?;
    let mut trainer = Trainer::new(cfg, Registry::with_builtins())?.with_output(&out)?;
    let summary = trainer.run()?;

    println!("step  mean_reward  accuracy  entropy  eval_accuracy");
    for m in summary.history.iter().filter(|m| m.global_step % 20 == 0 || m.eval_accuracy.is_some()) {
        let eval = m.eval_accuracy.map(|a| format!("{a:.3}")).unwrap_or_default();
        println!(
            "{:>4}  {:>11.3}  {:>8.3}  {:>7.3}  {eval:>13}",
            m.global_step, m.mean_reward, m.accuracy, m.entropy_mean
        );
    }
    let plots = write_plot_data(&out)?;
    println!("metrics, checkpoint and {} plot files in {}", plots.len(), out.display());
    Ok(())
}
