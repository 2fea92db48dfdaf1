//! Advantage estimators, policy-loss variants, KL penalties, aggregation and
//! the registry that binds configuration names to implementations.

pub mod advantage;
mod aggregate;
mod kl;
pub mod loss;
mod objective;
mod registry;

pub use advantage::{broadcast_rows, estimate_advantages, per_group, row_rewards, AdvantageOutput};
pub use aggregate::{agg_weights, aggregate, AggMode};
pub use kl::{kl_grad, kl_penalty, kl_value, KlEstimator};
pub use loss::{policy_loss, LossInput, LossOutput};
pub use objective::{total_objective, ObjectiveInput, ObjectiveOutput, ObjectiveStats};
pub use registry::{AdvantageFn, EstimatorEntry, PolicyLossEntry, PolicyLossFn, Registry};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KlConfig {
    pub estimator: KlEstimator,
    pub beta_kl: f64,
    /// Only `reference` is supported.
    pub target: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipConfig {
    pub eps: f64,
    pub eps_low: f64,
    pub eps_high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovConfig {
    pub fraction: f64,
    pub kl_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgoConfig {
    pub adv_estimator: String,
    pub policy_loss: String,
    pub kl: KlConfig,
    pub entropy_beta: f64,
    pub clip: ClipConfig,
    pub gamma: f64,
    pub lam: f64,
    pub group_size: usize,
    pub std_normalize: bool,
    pub std_eps: f64,
    pub agg_mode: AggMode,
    pub cov: CovConfig,
}

impl Default for AlgoConfig {
    fn default() -> Self {
        Self {
            adv_estimator: "grpo".into(),
            policy_loss: "ppo".into(),
            kl: KlConfig {
                estimator: KlEstimator::K3,
                beta_kl: 0.0,
                target: "reference".into(),
            },
            entropy_beta: 0.0,
            clip: ClipConfig {
                eps: 0.2,
                eps_low: 0.2,
                eps_high: 0.28,
            },
            gamma: 1.0,
            lam: 1.0,
            group_size: 8,
            std_normalize: true,
            std_eps: 1e-6,
            agg_mode: AggMode::TokenMean,
            cov: CovConfig {
                fraction: 0.02,
                kl_weight: 1.0,
            },
        }
    }
}

impl AlgoConfig {
    pub fn validate(&self, registry: &Registry) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.into()))
            }
        };
        check(self.kl.beta_kl >= 0.0, "algorithm.kl.beta_kl must be >= 0")?;
        check(
            self.kl.target == "reference",
            "algorithm.kl.target must be `reference`",
        )?;
        check(
            self.entropy_beta >= 0.0,
            "algorithm.entropy_beta must be >= 0",
        )?;
        check(
            self.clip.eps > 0.0 && self.clip.eps_low > 0.0 && self.clip.eps_high > 0.0,
            "algorithm.clip bounds must be > 0",
        )?;
        check(
            (0.0..=1.0).contains(&self.gamma),
            "algorithm.gamma must lie in [0, 1]",
        )?;
        check(
            (0.0..=1.0).contains(&self.lam),
            "algorithm.lam must lie in [0, 1]",
        )?;
        check(self.group_size >= 1, "algorithm.group_size must be >= 1")?;
        check(self.std_eps > 0.0, "algorithm.std_eps must be > 0")?;
        check(
            self.cov.fraction > 0.0 && self.cov.fraction < 1.0,
            "algorithm.cov.fraction must lie in (0, 1)",
        )?;
        check(
            self.cov.kl_weight >= 0.0,
            "algorithm.cov.kl_weight must be >= 0",
        )?;
        registry.estimator(&self.adv_estimator)?;
        registry.policy_loss(&self.policy_loss)?;
        Ok(())
    }
}
