//! Extends the engine without touching its source: a constant-baseline
//! advantage estimator and a brevity reward are registered, then selected
//! purely through the YAML config.
//!
//! ```text
//! cargo run --release --example custom_estimator
//! ```

use std::sync::Arc;

use rlforge::algo::advantage::{broadcast_rows, row_rewards, AdvantageOutput};
use rlforge::algo::{AdvantageFn, AlgoConfig, Registry};
use rlforge::proto::TrajectoryBatch;
use rlforge::reward::{RewardContext, RewardFn};

const CONFIG: &str = "
algorithm:
  adv_estimator: constant_baseline
  group_size: 4
reward:
  components: [accuracy, format, brevity]
  weights: [1.0, 0.1, 0.05]
trainer:
  batch_size: 8
  steps_per_iteration: 20
  log_every: 0
";

fn main() -> rlforge::Result<()> {
    let mut registry = Registry::with_builtins();

    // Advantage = reward - 0.5, broadcast over each row's response tokens.
    let constant_baseline: AdvantageFn = Arc::new(|batch: &TrajectoryBatch, _: &AlgoConfig| {
        let per_row: Vec<f64> = row_rewards(batch)?.iter().map(|r| r - 0.5).collect();
        Ok(AdvantageOutput {
            advantages: broadcast_rows(batch, &per_row)?,
            returns: None,
        })
    });
    registry.register_adv_estimator("constant_baseline", constant_baseline)?;

    // 1 for a single-token answer payload, decaying with extra tokens.
    let brevity: RewardFn = Arc::new(|c: &RewardContext<'_>| {
        let n = c.state.last_action().map_or(0, <[u32]>::len);
        1.0 / n.max(1) as f64
    });
    registry.register_reward_fn("brevity", brevity)?;

    let dir = std::env::temp_dir().join("rlforge_custom_estimator");
    std::fs::create_dir_all(&dir).map_err(|e| rlforge::Error::io(&dir, e))?;
    let cfg = dir.join("cfg.yaml");
    std::fs::write(&cfg, CONFIG).map_err(|e| rlforge::Error::io(&cfg, e))?;
    let out = dir.join("run");

    let args = ["rlforge", "plugins"];
    print!("{}", rlforge::cli::run_with_registry(args, registry.clone())?);
    let args = ["rlforge", "train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    print!("{}", rlforge::cli::run_with_registry(args, registry)?);
    Ok(())
}
