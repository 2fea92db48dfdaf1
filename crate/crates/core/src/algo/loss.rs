//! Policy-loss variants. Each returns the aggregated surrogate objective
//! (to be maximised) and its exact derivative with respect to the new
//! log-probabilities.

use std::sync::Arc;

use super::aggregate::{agg_weights, AggMode};
use super::registry::PolicyLossFn;
use super::AlgoConfig;
use crate::error::{Error, Result};

/// Flat `rows x width` arrays, all masked by `mask`.
#[derive(Clone, Copy)]
pub struct LossInput<'a> {
    pub new_logprobs: &'a [f64],
    pub old_logprobs: &'a [f64],
    pub advantages: &'a [f64],
    pub mask: &'a [f64],
    pub width: usize,
    /// Aggregation weights from [`agg_weights`].
    pub weights: &'a [f64],
    pub cfg: &'a AlgoConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub objective: f64,
    pub d_new: Vec<f64>,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
}

impl LossInput<'_> {
    fn rows(&self) -> usize {
        if self.width == 0 {
            0
        } else {
            self.mask.len() / self.width
        }
    }

    fn count(&self) -> f64 {
        self.mask.iter().sum::<f64>().max(1.0)
    }

    fn ratios(&self) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.mask.len()];
        for (i, o) in out.iter_mut().enumerate() {
            if self.mask[i] == 0.0 {
                continue;
            }
            let r = (self.new_logprobs[i] - self.old_logprobs[i]).exp();
            if !r.is_finite() {
                return Err(Error::Numeric(format!(
                    "importance ratio {r} in row {} at position {}",
                    i / self.width,
                    i % self.width
                )));
            }
            *o = r;
        }
        Ok(out)
    }

    fn mean_masked(&self, v: &[f64]) -> f64 {
        v.iter().zip(self.mask).map(|(x, m)| x * m).sum::<f64>() / self.count()
    }
}

/// Pessimistic clipped term: `(value, d value / d ratio, clipped branch active)`.
pub fn clipped_term(r: f64, a: f64, lo: f64, hi: f64) -> (f64, f64, bool) {
    let unclipped = r * a;
    let clipped = r.clamp(lo, hi) * a;
    if unclipped <= clipped {
        (unclipped, a, false)
    } else {
        (clipped, 0.0, true)
    }
}

/// Aggregates a per-token term `f(ratio, advantage) -> (g, dg/dratio, clipped)`.
fn per_token(
    input: &LossInput<'_>,
    f: impl Fn(f64, f64) -> (f64, f64, bool),
) -> Result<LossOutput> {
    let ratios = input.ratios()?;
    let mut out = LossOutput {
        objective: 0.0,
        d_new: vec![0.0; ratios.len()],
        clip_fraction: 0.0,
        mean_ratio: input.mean_masked(&ratios),
    };
    let mut clipped = 0.0;
    for i in 0..ratios.len() {
        if input.mask[i] == 0.0 {
            continue;
        }
        let (g, dg, c) = f(ratios[i], input.advantages[i]);
        out.objective += input.weights[i] * g;
        out.d_new[i] = input.weights[i] * dg * ratios[i];
        clipped += f64::from(u8::from(c));
    }
    out.clip_fraction = clipped / input.count();
    Ok(out)
}

fn vanilla(input: &LossInput<'_>) -> Result<LossOutput> {
    per_token(input, |r, a| (r * a, a, false))
}

fn ppo(input: &LossInput<'_>) -> Result<LossOutput> {
    let e = input.cfg.clip.eps;
    per_token(input, |r, a| clipped_term(r, a, 1.0 - e, 1.0 + e))
}

/// `min(r, clip(r)) * A`, which reduces to `min(r, 1 + eps) * A`.
fn ppo_literal(input: &LossInput<'_>) -> Result<LossOutput> {
    let e = input.cfg.clip.eps;
    per_token(input, |r, a| {
        if r <= 1.0 + e {
            (r * a, a, false)
        } else {
            ((1.0 + e) * a, 0.0, true)
        }
    })
}

fn dapo(input: &LossInput<'_>) -> Result<LossOutput> {
    let c = &input.cfg.clip;
    per_token(input, |r, a| {
        clipped_term(r, a, 1.0 - c.eps_low, 1.0 + c.eps_high)
    })
}

fn gpg_loss(input: &LossInput<'_>) -> Result<LossOutput> {
    let ratios = input.ratios()?;
    let mut out = LossOutput {
        objective: 0.0,
        d_new: vec![0.0; ratios.len()],
        clip_fraction: 0.0,
        mean_ratio: input.mean_masked(&ratios),
    };
    for i in 0..ratios.len() {
        if input.mask[i] != 0.0 {
            out.objective += input.weights[i] * input.new_logprobs[i] * input.advantages[i];
            out.d_new[i] = input.weights[i] * input.advantages[i];
        }
    }
    Ok(out)
}

fn gspo(input: &LossInput<'_>) -> Result<LossOutput> {
    let ratios = input.ratios()?;
    let e = input.cfg.clip.eps;
    let w = input.width;
    let mut out = LossOutput {
        objective: 0.0,
        d_new: vec![0.0; ratios.len()],
        clip_fraction: 0.0,
        mean_ratio: 0.0,
    };
    let (mut clipped, mut ratio_sum) = (0.0, 0.0);
    for r in 0..input.rows() {
        let span = r * w..(r + 1) * w;
        let n: f64 = input.mask[span.clone()].iter().sum();
        if n == 0.0 {
            continue;
        }
        let (mut log_sum, mut adv_sum, mut weight) = (0.0, 0.0, 0.0);
        for i in span.clone() {
            if input.mask[i] != 0.0 {
                log_sum += input.new_logprobs[i] - input.old_logprobs[i];
                adv_sum += input.advantages[i];
                weight += input.weights[i];
            }
        }
        let s = (log_sum / n).exp();
        if !s.is_finite() {
            return Err(Error::Numeric(format!("sequence ratio {s} in row {r}")));
        }
        let (g, dg, c) = clipped_term(s, adv_sum / n, 1.0 - e, 1.0 + e);
        out.objective += weight * g;
        for i in span {
            if input.mask[i] != 0.0 {
                out.d_new[i] = weight * dg * s / n;
            }
        }
        clipped += f64::from(u8::from(c)) * n;
        ratio_sum += s * n;
    }
    out.clip_fraction = clipped / input.count();
    out.mean_ratio = ratio_sum / input.count();
    Ok(out)
}

/// Running geometric-mean ratio over each row's response tokens.
fn geo_mean(input: &LossInput<'_>) -> Result<LossOutput> {
    let e = input.cfg.clip.eps;
    let w = input.width;
    let mut out = LossOutput {
        objective: 0.0,
        d_new: vec![0.0; input.mask.len()],
        clip_fraction: 0.0,
        mean_ratio: 0.0,
    };
    let (mut clipped, mut ratio_sum) = (0.0, 0.0);
    for r in 0..input.rows() {
        let span = r * w..(r + 1) * w;
        // coef[t] = w_t * dg_t/drho_t * rho_t / k_t, summed backwards.
        let mut coef = vec![0.0; w];
        let (mut k, mut log_sum) = (0.0, 0.0);
        for (j, i) in span.clone().enumerate() {
            if input.mask[i] == 0.0 {
                continue;
            }
            k += 1.0;
            log_sum += input.new_logprobs[i] - input.old_logprobs[i];
            let rho = (log_sum / k).exp();
            if !rho.is_finite() {
                return Err(Error::Numeric(format!(
                    "geometric-mean ratio {rho} in row {r}"
                )));
            }
            let (g, dg, c) = clipped_term(rho, input.advantages[i], 1.0 - e, 1.0 + e);
            out.objective += input.weights[i] * g;
            coef[j] = input.weights[i] * dg * rho / k;
            clipped += f64::from(u8::from(c));
            ratio_sum += rho;
        }
        let mut acc = 0.0;
        for (j, i) in span.enumerate().rev() {
            acc += coef[j];
            if input.mask[i] != 0.0 {
                out.d_new[i] = acc;
            }
        }
    }
    out.clip_fraction = clipped / input.count();
    out.mean_ratio = ratio_sum / input.count();
    Ok(out)
}

/// Masked positions of the `ceil(fraction * N)` largest covariance
/// statistics; ties keep the earlier token.
fn top_covariance(input: &LossInput<'_>) -> Vec<usize> {
    let idx: Vec<usize> = (0..input.mask.len())
        .filter(|&i| input.mask[i] != 0.0)
        .collect();
    if idx.is_empty() {
        return idx;
    }
    let n = idx.len() as f64;
    let mlp = idx.iter().map(|&i| input.new_logprobs[i]).sum::<f64>() / n;
    let madv = idx.iter().map(|&i| input.advantages[i]).sum::<f64>() / n;
    let mut scored: Vec<(f64, usize)> = idx
        .iter()
        .map(|&i| {
            (
                (input.new_logprobs[i] - mlp) * (input.advantages[i] - madv),
                i,
            )
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let k = (input.cfg.cov.fraction * n).ceil() as usize;
    scored.into_iter().take(k).map(|(_, i)| i).collect()
}

fn clip_cov(input: &LossInput<'_>) -> Result<LossOutput> {
    let e = input.cfg.clip.eps;
    let excluded = top_covariance(input);
    let ratios = input.ratios()?;
    let mut out = per_token(input, |r, a| clipped_term(r, a, 1.0 - e, 1.0 + e))?;
    for i in excluded {
        let (g, _, _) = clipped_term(ratios[i], input.advantages[i], 1.0 - e, 1.0 + e);
        out.objective -= input.weights[i] * g;
        out.d_new[i] = 0.0;
    }
    Ok(out)
}

fn kl_cov(input: &LossInput<'_>) -> Result<LossOutput> {
    let kw = input.cfg.cov.kl_weight;
    let selected = top_covariance(input);
    let mut out = vanilla(input)?;
    for i in selected {
        let d = input.old_logprobs[i] - input.new_logprobs[i];
        out.objective -= input.weights[i] * kw * 0.5 * d * d;
        out.d_new[i] += input.weights[i] * kw * d;
    }
    Ok(out)
}

/// `(name, forced aggregation, implementation)` for every built-in loss.
pub(crate) fn builtin_losses() -> Vec<(&'static str, Option<AggMode>, PolicyLossFn)> {
    fn wrap(f: fn(&LossInput<'_>) -> Result<LossOutput>) -> PolicyLossFn {
        Arc::new(f)
    }
    vec![
        ("vanilla", None, wrap(vanilla)),
        ("ppo", None, wrap(ppo)),
        ("ppo_literal", None, wrap(ppo_literal)),
        ("dapo", Some(AggMode::TokenMean), wrap(dapo)),
        ("gspo", None, wrap(gspo)),
        ("geo_mean", None, wrap(geo_mean)),
        ("gpg", None, wrap(gpg_loss)),
        ("clip_cov", None, wrap(clip_cov)),
        ("kl_cov", None, wrap(kl_cov)),
    ]
}

/// Evaluates a loss by name with weights from the configured (or forced)
/// aggregation mode. Returns `-objective` as the loss.
pub fn policy_loss(
    registry: &super::Registry,
    cfg: &AlgoConfig,
    new_logprobs: &[f64],
    old_logprobs: &[f64],
    advantages: &[f64],
    mask: &[f64],
    width: usize,
) -> Result<(f64, LossOutput)> {
    let entry = registry.policy_loss(&cfg.policy_loss)?;
    let mode = entry.forced_agg.unwrap_or(cfg.agg_mode);
    let weights = agg_weights(mask, width, mode)?;
    let out = (entry.func)(&LossInput {
        new_logprobs,
        old_logprobs,
        advantages,
        mask,
        width,
        weights: &weights,
        cfg,
    })?;
    Ok((-out.objective, out))
}
