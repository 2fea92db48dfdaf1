//! Exact gradients of sequence-level objectives.
//!
//! Objectives are expressed through the per-position statistics the
//! algorithms consume (log-probs of the taken actions and policy entropies),
//! so a loss closure only has to return derivatives with respect to those.

use super::model::{
    log_softmax, project_logits, project_logits_backward, response_token, trunk_backward,
    trunk_forward, value_from_hidden,
};
use super::params::{CriticParams, ParamSet, PolicyParams};
use crate::error::{Error, Result};
use crate::proto::InputItem;

/// One sequence fed to [`grad`].
#[derive(Debug, Clone, Copy)]
pub struct SequenceRef<'a> {
    pub items: &'a [InputItem],
    pub response_mask: &'a [u8],
}

/// Per-position statistics of one sequence; zero off the response mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceStats {
    pub logprobs: Vec<f64>,
    pub entropies: Vec<f64>,
}

/// Derivatives of the loss with respect to [`SequenceStats`].
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceGrads {
    pub d_logprobs: Vec<f64>,
    pub d_entropies: Vec<f64>,
}

impl SequenceGrads {
    pub fn zeros(len: usize) -> Self {
        Self {
            d_logprobs: vec![0.0; len],
            d_entropies: vec![0.0; len],
        }
    }
}

/// Statistics without building a gradient.
pub fn sequence_stats(params: &PolicyParams, seq: SequenceRef<'_>) -> Result<SequenceStats> {
    let cache = trunk_forward(&params.trunk_view(), seq.items)?;
    Ok(stats_from_cache(params, seq, &cache.h2)?.0)
}

struct RowDist {
    t: usize,
    y: usize,
    logp: Vec<f64>,
}

fn stats_from_cache(
    params: &PolicyParams,
    seq: SequenceRef<'_>,
    h2: &[f64],
) -> Result<(SequenceStats, Vec<RowDist>)> {
    let h = &params.hyper;
    let (l, d, a) = (seq.items.len(), h.d_model, h.action_vocab);
    if seq.response_mask.len() != l {
        return Err(Error::Dimension(format!(
            "response mask has {} entries for {l} positions",
            seq.response_mask.len()
        )));
    }
    let mut stats = SequenceStats {
        logprobs: vec![0.0; l],
        entropies: vec![0.0; l],
    };
    let mut rows = Vec::new();
    let mut logits = vec![0.0; h.vocab_size];
    for t in 0..l {
        if seq.response_mask[t] == 0 {
            continue;
        }
        let y = response_token(seq.items, t, a)?;
        project_logits(params, &h2[(t - 1) * d..t * d], &mut logits);
        let logp = log_softmax(&logits[..a]);
        stats.logprobs[t] = logp[y];
        stats.entropies[t] = logp.iter().map(|&lp| -lp.exp() * lp).sum::<f64>().max(0.0);
        rows.push(RowDist { t, y, logp });
    }
    Ok((stats, rows))
}

/// Evaluates `loss_fn` on the statistics of every sequence and returns the
/// loss with its gradient with respect to every policy parameter.
pub fn grad<F>(
    params: &PolicyParams,
    seqs: &[SequenceRef<'_>],
    loss_fn: F,
) -> Result<(f64, PolicyParams)>
where
    F: FnOnce(&[SequenceStats]) -> Result<(f64, Vec<SequenceGrads>)>,
{
    let view = params.trunk_view();
    let mut caches = Vec::with_capacity(seqs.len());
    let mut stats = Vec::with_capacity(seqs.len());
    let mut dists = Vec::with_capacity(seqs.len());
    for &seq in seqs {
        let cache = trunk_forward(&view, seq.items)?;
        let (s, r) = stats_from_cache(params, seq, &cache.h2)?;
        caches.push(cache);
        stats.push(s);
        dists.push(r);
    }
    let (loss, dstats) = loss_fn(&stats)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {loss}")));
    }
    if dstats.len() != seqs.len() {
        return Err(Error::Dimension(format!(
            "loss returned {} gradient rows for {} sequences",
            dstats.len(),
            seqs.len()
        )));
    }

    let h = params.hyper.clone();
    let (d, a) = (h.d_model, h.action_vocab);
    let mut g = params.zeros_like();
    let mut dlogits = vec![0.0; h.vocab_size];
    for (i, &seq) in seqs.iter().enumerate() {
        let ds = &dstats[i];
        let l = seq.items.len();
        if ds.d_logprobs.len() != l || ds.d_entropies.len() != l {
            return Err(Error::Dimension(format!(
                "gradient row {i} does not match length {l}"
            )));
        }
        let cache = &caches[i];
        let mut dh2 = vec![0.0; l * d];
        let mut any = false;
        for row in &dists[i] {
            let (dlp, dent) = (ds.d_logprobs[row.t], ds.d_entropies[row.t]);
            if dlp == 0.0 && dent == 0.0 {
                continue;
            }
            any = true;
            let ent = stats[i].entropies[row.t];
            dlogits.iter_mut().for_each(|x| *x = 0.0);
            for (j, &lp) in row.logp.iter().enumerate().take(a) {
                let p = lp.exp();
                let onehot = if j == row.y { 1.0 } else { 0.0 };
                // d log p_y / dz_j = 1[j=y] - p_j; dH/dz_j = -p_j (log p_j + H)
                let plogp = if p > 0.0 { p * lp } else { 0.0 };
                dlogits[j] = dlp * (onehot - p) + dent * (-(plogp + p * ent));
            }
            let (t0, t1) = ((row.t - 1) * d, row.t * d);
            project_logits_backward(
                params,
                &cache.h2[t0..t1],
                &dlogits,
                &mut g.lm.out_proj,
                &mut dh2[t0..t1],
            );
        }
        if any {
            trunk_backward(&view, seq.items, cache, &dh2, &mut g.trunk_grads());
        }
    }
    if !g.all_finite() {
        return Err(Error::Numeric("non-finite policy gradient".into()));
    }
    Ok((loss, g))
}

/// Critic analogue of [`grad`]: `loss_fn` receives per-position values of
/// every sequence and returns derivatives with respect to them.
pub fn value_grad<F>(
    critic: &CriticParams,
    seqs: &[&[InputItem]],
    loss_fn: F,
) -> Result<(f64, CriticParams)>
where
    F: FnOnce(&[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)>,
{
    let view = critic.trunk_view();
    let d = critic.hyper.d_model;
    let mut caches = Vec::with_capacity(seqs.len());
    let mut values = Vec::with_capacity(seqs.len());
    for &items in seqs {
        let cache = trunk_forward(&view, items)?;
        values.push(
            (0..items.len())
                .map(|t| value_from_hidden(critic, &cache.h2[t * d..(t + 1) * d]))
                .collect::<Vec<_>>(),
        );
        caches.push(cache);
    }
    let (loss, dvals) = loss_fn(&values)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("value loss is {loss}")));
    }
    if dvals.len() != seqs.len() {
        return Err(Error::Dimension(
            "value gradient rows do not match sequences".into(),
        ));
    }
    let mut g = critic.zeros_like();
    for (i, &items) in seqs.iter().enumerate() {
        let l = items.len();
        if dvals[i].len() != l {
            return Err(Error::Dimension(format!(
                "value gradient row {i} does not match length {l}"
            )));
        }
        if dvals[i].iter().all(|&x| x == 0.0) {
            continue;
        }
        let cache = &caches[i];
        let mut dh2 = vec![0.0; l * d];
        for t in 0..l {
            let dv = dvals[i][t];
            if dv == 0.0 {
                continue;
            }
            let h2 = &cache.h2[t * d..(t + 1) * d];
            for (k, (&hk, gh)) in h2.iter().zip(&mut dh2[t * d..(t + 1) * d]).enumerate() {
                g.value_head.data[k] += dv * hk;
                *gh = dv * critic.value_head.data[k];
            }
        }
        trunk_backward(&view, items, cache, &dh2, &mut g.trunk_grads());
    }
    if !g.all_finite() {
        return Err(Error::Numeric("non-finite critic gradient".into()));
    }
    Ok((loss, g))
}

/// Adds `coef * ||params||^2` to a gradient accumulator and returns the term.
pub fn add_squared_norm<P: ParamSet>(params: &P, coef: f64, grad: &mut P) -> f64 {
    grad.add_scaled(2.0 * coef, params);
    coef * params.squared_norm()
}
