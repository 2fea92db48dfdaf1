//! Autoregressive decoding with temperature, top-k and n-gram blocking.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{last_logits, log_softmax};
use super::params::PolicyParams;
use crate::error::{Error, Result};
use crate::proto::{InputItem, StopReason};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    /// 0 means greedy argmax.
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub max_new_tokens: usize,
    pub stop_tokens: Vec<u32>,
    /// Block any token that would complete an n-gram already present in the
    /// generated span.
    pub ngram_block: Option<usize>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: None,
            max_new_tokens: 4,
            stop_tokens: Vec::new(),
            ngram_block: None,
        }
    }
}

impl SamplingConfig {
    pub fn greedy(&self) -> Self {
        Self {
            temperature: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        if self.top_k == Some(0) {
            return Err(Error::Config("top_k must be positive".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be positive".into()));
        }
        if matches!(self.ngram_block, Some(n) if n < 2) {
            return Err(Error::Config("ngram_block must be at least 2".into()));
        }
        Ok(())
    }
}

/// Tokens emitted by one call to [`sample`].
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    /// Untempered `log pi(token | prefix)`, matching `logprob_of` on the
    /// extended sequence.
    pub logprobs: Vec<f64>,
    pub stop_reason: StopReason,
}

/// Tokens whose emission would repeat an `n`-gram of `generated`.
fn blocked_tokens(generated: &[u32], n: usize) -> Vec<u32> {
    if generated.len() < n - 1 {
        return Vec::new();
    }
    let tail = &generated[generated.len() - (n - 1)..];
    generated
        .windows(n)
        .filter(|w| &w[..n - 1] == tail)
        .map(|w| w[n - 1])
        .collect()
}

/// Index chosen from `logits` under the config. Blocked entries must already
/// be `-inf`.
pub(crate) fn choose<R: Rng>(logits: &[f64], cfg: &SamplingConfig, rng: &mut R) -> usize {
    if cfg.temperature == 0.0 {
        let mut best = 0;
        for (i, &z) in logits.iter().enumerate() {
            if z > logits[best] {
                best = i;
            }
        }
        return best;
    }
    let mut scaled: Vec<f64> = logits.iter().map(|&z| z / cfg.temperature).collect();
    if let Some(k) = cfg.top_k {
        if k < scaled.len() {
            let mut sorted = scaled.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let cutoff = sorted[k - 1];
            // Ties at the cutoff keep the lowest indices so exactly k survive.
            let mut kept = 0;
            for z in scaled.iter_mut() {
                if *z > cutoff {
                    kept += 1;
                }
            }
            for z in scaled.iter_mut() {
                if *z < cutoff || (*z == cutoff && kept >= k) {
                    *z = f64::NEG_INFINITY;
                } else if *z == cutoff {
                    kept += 1;
                }
            }
        }
    }
    let probs: Vec<f64> = log_softmax(&scaled).into_iter().map(f64::exp).collect();
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Samples one action continuing `prefix`. Stops on a stop token, after
/// `max_new_tokens`, or when the context is full.
pub fn sample<R: Rng>(
    params: &PolicyParams,
    prefix: &[InputItem],
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Result<Generation> {
    let a = params.hyper.action_vocab;
    decode(prefix, cfg, rng, params.hyper.max_len, |items| {
        let logits = last_logits(params, items)?;
        Ok(log_softmax(&logits[..a]))
    })
}

/// Decoding loop shared by every inference backend. `next_logprobs` maps a
/// prefix to normalised log-probabilities over the action tokens.
pub fn decode<R, F>(
    prefix: &[InputItem],
    cfg: &SamplingConfig,
    rng: &mut R,
    max_len: usize,
    mut next_logprobs: F,
) -> Result<Generation>
where
    R: Rng,
    F: FnMut(&[InputItem]) -> Result<Vec<f64>>,
{
    if prefix.len() >= max_len {
        return Err(Error::Capacity {
            len: prefix.len() + 1,
            max_len,
        });
    }
    let mut items = prefix.to_vec();
    let mut out = Generation {
        tokens: Vec::new(),
        logprobs: Vec::new(),
        stop_reason: StopReason::Length,
    };
    while out.tokens.len() < cfg.max_new_tokens && items.len() < max_len {
        let logp = next_logprobs(&items)?;
        let mut masked = logp.clone();
        if let Some(n) = cfg.ngram_block {
            for tok in blocked_tokens(&out.tokens, n) {
                masked[tok as usize] = f64::NEG_INFINITY;
            }
            if masked.iter().all(|z| *z == f64::NEG_INFINITY) {
                masked.clone_from(&logp);
            }
        }
        let tok = choose(&masked, cfg, rng);
        out.tokens.push(tok as u32);
        out.logprobs.push(logp[tok]);
        items.push(InputItem::Token(tok as u32));
        if cfg.stop_tokens.contains(&(tok as u32)) {
            out.stop_reason = StopReason::Stop;
            break;
        }
    }
    Ok(out)
}
