use serde::{Deserialize, Serialize};

use super::aggregate::agg_weights;
use super::kl::{kl_grad, kl_value};
use super::loss::LossInput;
use super::{AlgoConfig, Registry};
use crate::error::{Error, Result};
use crate::proto::field;

/// Flat `rows x width` inputs to [`total_objective`].
#[derive(Clone, Copy)]
pub struct ObjectiveInput<'a> {
    pub new_logprobs: &'a [f64],
    pub old_logprobs: &'a [f64],
    pub ref_logprobs: Option<&'a [f64]>,
    pub entropies: &'a [f64],
    pub advantages: &'a [f64],
    pub mask: &'a [f64],
    pub width: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveStats {
    pub policy_loss: f64,
    /// Mean estimator value against the reference, when one is supplied.
    pub kl_mean: Option<f64>,
    pub entropy_mean: f64,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveOutput {
    pub loss: f64,
    /// d loss / d new_logprobs.
    pub d_new: Vec<f64>,
    /// d loss / d entropies.
    pub d_entropy: Vec<f64>,
    pub stats: ObjectiveStats,
}

/// `loss = -(agg(g) - beta_kl * agg(kl) + beta_ent * agg(H))`.
pub fn total_objective(
    input: ObjectiveInput<'_>,
    cfg: &AlgoConfig,
    registry: &Registry,
) -> Result<ObjectiveOutput> {
    let n = input.mask.len();
    for (name, len) in [
        ("old_logprobs", input.old_logprobs.len()),
        ("entropies", input.entropies.len()),
        ("advantages", input.advantages.len()),
        ("new_logprobs", input.new_logprobs.len()),
    ] {
        if len != n {
            return Err(Error::Dimension(format!(
                "{name} has {len} entries, mask has {n}"
            )));
        }
    }
    if cfg.kl.beta_kl > 0.0 && input.ref_logprobs.is_none() {
        return Err(Error::MissingField(field::REF_LOGPROBS.into()));
    }
    let entry = registry.policy_loss(&cfg.policy_loss)?;
    let weights = agg_weights(
        input.mask,
        input.width,
        entry.forced_agg.unwrap_or(cfg.agg_mode),
    )?;
    let pg = (entry.func)(&LossInput {
        new_logprobs: input.new_logprobs,
        old_logprobs: input.old_logprobs,
        advantages: input.advantages,
        mask: input.mask,
        width: input.width,
        weights: &weights,
        cfg,
    })?;

    let count: f64 = input.mask.iter().sum();
    let mut objective = pg.objective;
    let mut d_new: Vec<f64> = pg.d_new.iter().map(|d| -d).collect();
    let mut d_entropy = vec![0.0; n];
    let mut kl_sum = 0.0;
    let mut ent_sum = 0.0;
    for i in 0..n {
        if input.mask[i] == 0.0 {
            continue;
        }
        ent_sum += input.entropies[i];
        if cfg.entropy_beta > 0.0 {
            objective += cfg.entropy_beta * weights[i] * input.entropies[i];
            d_entropy[i] = -cfg.entropy_beta * weights[i];
        }
        if let Some(reference) = input.ref_logprobs {
            let (new, r) = (input.new_logprobs[i], reference[i]);
            kl_sum += kl_value(cfg.kl.estimator, new, r);
            if cfg.kl.beta_kl > 0.0 {
                objective -= cfg.kl.beta_kl * weights[i] * kl_value(cfg.kl.estimator, new, r);
                d_new[i] += cfg.kl.beta_kl * weights[i] * kl_grad(cfg.kl.estimator, new, r);
            }
        }
    }
    let loss = -objective;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("objective evaluated to {loss}")));
    }
    Ok(ObjectiveOutput {
        loss,
        d_new,
        d_entropy,
        stats: ObjectiveStats {
            policy_loss: -pg.objective,
            kl_mean: input.ref_logprobs.map(|_| kl_sum / count),
            entropy_mean: ent_sum / count,
            clip_fraction: pg.clip_fraction,
            mean_ratio: pg.mean_ratio,
        },
    })
}
