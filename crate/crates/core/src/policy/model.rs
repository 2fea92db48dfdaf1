//! Forward and backward passes of the trunk, policy head and value head.
//!
//! Everything is plain `f64` loops over row-major buffers. The backward pass
//! is written by hand and checked against central finite differences in the
//! tests below and in the acceptance suite.

use super::params::{Connector, CriticParams, Encoder, Hyper, PolicyParams, Tensor, Trunk};
use crate::error::{Error, Result};
use crate::proto::InputItem;

pub(crate) struct TrunkView<'a> {
    pub hyper: &'a Hyper,
    pub trunk: &'a Trunk,
    pub encoder: &'a Encoder,
    pub connector: &'a Connector,
}

pub(crate) struct TrunkGrads<'a> {
    pub trunk: &'a mut Trunk,
    pub encoder: &'a mut Encoder,
    pub connector: &'a mut Connector,
}

impl PolicyParams {
    pub(crate) fn trunk_view(&self) -> TrunkView<'_> {
        TrunkView {
            hyper: &self.hyper,
            trunk: &self.lm.trunk,
            encoder: &self.encoder,
            connector: &self.connector,
        }
    }

    pub(crate) fn trunk_grads(&mut self) -> TrunkGrads<'_> {
        TrunkGrads {
            trunk: &mut self.lm.trunk,
            encoder: &mut self.encoder,
            connector: &mut self.connector,
        }
    }
}

impl CriticParams {
    pub(crate) fn trunk_view(&self) -> TrunkView<'_> {
        TrunkView {
            hyper: &self.hyper,
            trunk: &self.trunk,
            encoder: &self.encoder,
            connector: &self.connector,
        }
    }

    pub(crate) fn trunk_grads(&mut self) -> TrunkGrads<'_> {
        TrunkGrads {
            trunk: &mut self.trunk,
            encoder: &mut self.encoder,
            connector: &mut self.connector,
        }
    }
}

/// Activations kept for the backward pass.
pub(crate) struct TrunkCache {
    pub len: usize,
    x: Vec<f64>,
    cell_in: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: Vec<f64>,
    z: Vec<f64>,
    h1: Vec<f64>,
    u: Vec<f64>,
    r: Vec<f64>,
    pub h2: Vec<f64>,
}

#[inline]
fn vec_mat(x: &[f64], w: &Tensor, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (k, &xk) in x.iter().enumerate() {
        if xk == 0.0 {
            continue;
        }
        for (o, &wv) in out.iter_mut().zip(w.row(k)) {
            *o += xk * wv;
        }
    }
}

/// `out = W * g` for a row-major `W` (i.e. `g * W^T` as a row vector).
#[inline]
fn mat_vec(w: &Tensor, g: &[f64], out: &mut [f64]) {
    for (k, o) in out.iter_mut().enumerate() {
        *o = dot(w.row(k), g);
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `dW += x^T g` for one row.
#[inline]
fn outer_acc(dw: &mut Tensor, x: &[f64], g: &[f64]) {
    for (k, &xk) in x.iter().enumerate() {
        if xk == 0.0 {
            continue;
        }
        for (d, &gv) in dw.row_mut(k).iter_mut().zip(g) {
            *d += xk * gv;
        }
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

pub(crate) fn check_items(h: &Hyper, items: &[InputItem]) -> Result<()> {
    if items.len() > h.max_len {
        return Err(Error::Capacity {
            len: items.len(),
            max_len: h.max_len,
        });
    }
    for item in items {
        match *item {
            InputItem::Token(id) if id as usize >= h.vocab_size => {
                return Err(Error::Dimension(format!(
                    "token {id} outside vocabulary of {}",
                    h.vocab_size
                )))
            }
            InputItem::Cell { symbol, row, col }
                if symbol as usize >= h.num_cell_symbols
                    || row as usize >= h.grid_height
                    || col as usize >= h.grid_width =>
            {
                return Err(Error::Dimension(format!(
                    "cell ({row},{col}) symbol {symbol} outside encoder range"
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Input embedding of position `t`; fills `cell_in` with the encoder output
/// for observation cells (left untouched for tokens).
fn embed_one(view: &TrunkView<'_>, t: usize, item: InputItem, x: &mut [f64], cell_in: &mut [f64]) {
    let h = view.hyper;
    x.copy_from_slice(view.trunk.pos_emb.row(t));
    match item {
        InputItem::Token(id) => axpy(x, 1.0, view.trunk.tok_emb.row(id as usize)),
        InputItem::Cell { symbol, row, col } => {
            let g = row as usize * h.grid_width + col as usize;
            for ((c, &e), &p) in cell_in
                .iter_mut()
                .zip(view.encoder.cell_emb.row(symbol as usize))
                .zip(view.encoder.grid_pos.row(g))
            {
                *c = e + p;
            }
            let mut proj = vec![0.0; h.d_model];
            vec_mat(cell_in, &view.connector.weight, &mut proj);
            for ((xv, &pv), &bv) in x.iter_mut().zip(&proj).zip(&view.connector.bias.data) {
                *xv += pv + bv;
            }
        }
    }
}

/// Causal attention for query row `t`; writes normalised weights into
/// `weights[..=t]` and the mixed value into `z`.
fn attend_row(
    q_t: &[f64],
    k: &[f64],
    v: &[f64],
    t: usize,
    d: usize,
    weights: &mut [f64],
    z: &mut [f64],
) {
    let scale = 1.0 / (d as f64).sqrt();
    let mut max = f64::NEG_INFINITY;
    for j in 0..=t {
        let s = dot(q_t, &k[j * d..(j + 1) * d]) * scale;
        weights[j] = s;
        max = max.max(s);
    }
    let mut sum = 0.0;
    for w in weights[..=t].iter_mut() {
        *w = (*w - max).exp();
        sum += *w;
    }
    z.iter_mut().for_each(|x| *x = 0.0);
    for j in 0..=t {
        weights[j] /= sum;
        axpy(z, weights[j], &v[j * d..(j + 1) * d]);
    }
}

/// Everything after attention for one row: output map, residual, FFN.
fn post_attention_row(
    view: &TrunkView<'_>,
    x_t: &[f64],
    z_t: &[f64],
    h1_t: &mut [f64],
    u_t: &mut [f64],
    r_t: &mut [f64],
    h2_t: &mut [f64],
) {
    let tr = view.trunk;
    vec_mat(z_t, &tr.w_o, h1_t);
    axpy(h1_t, 1.0, x_t);
    vec_mat(h1_t, &tr.ff_in, u_t);
    axpy(u_t, 1.0, &tr.ff_in_bias.data);
    for (r, &u) in r_t.iter_mut().zip(u_t.iter()) {
        *r = u.max(0.0);
    }
    vec_mat(r_t, &tr.ff_out, h2_t);
    axpy(h2_t, 1.0, &tr.ff_out_bias.data);
    axpy(h2_t, 1.0, h1_t);
}

pub(crate) fn trunk_forward(view: &TrunkView<'_>, items: &[InputItem]) -> Result<TrunkCache> {
    let h = view.hyper;
    check_items(h, items)?;
    let (l, d, dv, dff) = (items.len(), h.d_model, h.d_visual, h.d_ff());
    let mut c = TrunkCache {
        len: l,
        x: vec![0.0; l * d],
        cell_in: vec![0.0; l * dv],
        q: vec![0.0; l * d],
        k: vec![0.0; l * d],
        v: vec![0.0; l * d],
        attn: vec![0.0; l * l],
        z: vec![0.0; l * d],
        h1: vec![0.0; l * d],
        u: vec![0.0; l * dff],
        r: vec![0.0; l * dff],
        h2: vec![0.0; l * d],
    };
    for (t, &item) in items.iter().enumerate() {
        embed_one(
            view,
            t,
            item,
            &mut c.x[t * d..(t + 1) * d],
            &mut c.cell_in[t * dv..(t + 1) * dv],
        );
        let xt = &c.x[t * d..(t + 1) * d];
        vec_mat(xt, &view.trunk.w_q, &mut c.q[t * d..(t + 1) * d]);
        vec_mat(xt, &view.trunk.w_k, &mut c.k[t * d..(t + 1) * d]);
        vec_mat(xt, &view.trunk.w_v, &mut c.v[t * d..(t + 1) * d]);
    }
    for t in 0..l {
        attend_row(
            &c.q[t * d..(t + 1) * d],
            &c.k,
            &c.v,
            t,
            d,
            &mut c.attn[t * l..(t + 1) * l],
            &mut c.z[t * d..(t + 1) * d],
        );
        post_attention_row(
            view,
            &c.x[t * d..(t + 1) * d],
            &c.z[t * d..(t + 1) * d],
            &mut c.h1[t * d..(t + 1) * d],
            &mut c.u[t * dff..(t + 1) * dff],
            &mut c.r[t * dff..(t + 1) * dff],
            &mut c.h2[t * d..(t + 1) * d],
        );
    }
    Ok(c)
}

/// Final hidden state of the last position only. Bit-identical to the last
/// row of [`trunk_forward`] since it runs the same per-row kernels.
pub(crate) fn trunk_last_hidden(view: &TrunkView<'_>, items: &[InputItem]) -> Result<Vec<f64>> {
    let h = view.hyper;
    check_items(h, items)?;
    let (l, d, dv, dff) = (items.len(), h.d_model, h.d_visual, h.d_ff());
    if l == 0 {
        return Err(Error::EmptyInput(
            "cannot run the policy on an empty sequence".into(),
        ));
    }
    let mut x = vec![0.0; l * d];
    let mut k = vec![0.0; l * d];
    let mut v = vec![0.0; l * d];
    let mut cell_in = vec![0.0; dv];
    for (t, &item) in items.iter().enumerate() {
        let xt = &mut x[t * d..(t + 1) * d];
        embed_one(view, t, item, xt, &mut cell_in);
        vec_mat(xt, &view.trunk.w_k, &mut k[t * d..(t + 1) * d]);
        vec_mat(xt, &view.trunk.w_v, &mut v[t * d..(t + 1) * d]);
    }
    let t = l - 1;
    let xt = &x[t * d..];
    let mut q = vec![0.0; d];
    vec_mat(xt, &view.trunk.w_q, &mut q);
    let mut weights = vec![0.0; l];
    let mut z = vec![0.0; d];
    attend_row(&q, &k, &v, t, d, &mut weights, &mut z);
    let (mut h1, mut u, mut r, mut h2) =
        (vec![0.0; d], vec![0.0; dff], vec![0.0; dff], vec![0.0; d]);
    post_attention_row(view, xt, &z, &mut h1, &mut u, &mut r, &mut h2);
    Ok(h2)
}

/// Backpropagates `dh2` (`len x d_model`) through the trunk, accumulating
/// into `grads`.
pub(crate) fn trunk_backward(
    view: &TrunkView<'_>,
    items: &[InputItem],
    c: &TrunkCache,
    dh2: &[f64],
    grads: &mut TrunkGrads<'_>,
) {
    let h = view.hyper;
    let tr = view.trunk;
    let (l, d, dv, dff) = (c.len, h.d_model, h.d_visual, h.d_ff());
    let scale = 1.0 / (d as f64).sqrt();

    let mut dx = vec![0.0; l * d];
    let mut dz = vec![0.0; l * d];
    let mut du = vec![0.0; dff];
    let mut dr = vec![0.0; dff];
    let mut tmp = vec![0.0; d];
    for t in 0..l {
        let g2 = &dh2[t * d..(t + 1) * d];
        // h2 = h1 + relu(h1 W1 + b1) W2 + b2
        outer_acc(&mut grads.trunk.ff_out, &c.r[t * dff..(t + 1) * dff], g2);
        axpy(&mut grads.trunk.ff_out_bias.data, 1.0, g2);
        mat_vec(&tr.ff_out, g2, &mut dr);
        for j in 0..dff {
            du[j] = if c.u[t * dff + j] > 0.0 { dr[j] } else { 0.0 };
        }
        outer_acc(&mut grads.trunk.ff_in, &c.h1[t * d..(t + 1) * d], &du);
        axpy(&mut grads.trunk.ff_in_bias.data, 1.0, &du);
        let mut dh1 = g2.to_vec();
        mat_vec(&tr.ff_in, &du, &mut tmp);
        axpy(&mut dh1, 1.0, &tmp);
        // h1 = x + z Wo
        outer_acc(&mut grads.trunk.w_o, &c.z[t * d..(t + 1) * d], &dh1);
        mat_vec(&tr.w_o, &dh1, &mut dz[t * d..(t + 1) * d]);
        axpy(&mut dx[t * d..(t + 1) * d], 1.0, &dh1);
    }

    // Attention.
    let mut dq = vec![0.0; l * d];
    let mut dk = vec![0.0; l * d];
    let mut dv_ = vec![0.0; l * d];
    let mut da = vec![0.0; l];
    for t in 0..l {
        let a = &c.attn[t * l..t * l + t + 1];
        let dzt = &dz[t * d..(t + 1) * d];
        let mut weighted = 0.0;
        for j in 0..=t {
            axpy(&mut dv_[j * d..(j + 1) * d], a[j], dzt);
            da[j] = dot(dzt, &c.v[j * d..(j + 1) * d]);
            weighted += a[j] * da[j];
        }
        for j in 0..=t {
            let ds = a[j] * (da[j] - weighted) * scale;
            if ds == 0.0 {
                continue;
            }
            axpy(&mut dq[t * d..(t + 1) * d], ds, &c.k[j * d..(j + 1) * d]);
            axpy(&mut dk[j * d..(j + 1) * d], ds, &c.q[t * d..(t + 1) * d]);
        }
    }
    for t in 0..l {
        let xt = &c.x[t * d..(t + 1) * d];
        let dxt = &mut dx[t * d..(t + 1) * d];
        for (w, dw, g) in [
            (&tr.w_q, &mut grads.trunk.w_q, &dq[t * d..(t + 1) * d]),
            (&tr.w_k, &mut grads.trunk.w_k, &dk[t * d..(t + 1) * d]),
            (&tr.w_v, &mut grads.trunk.w_v, &dv_[t * d..(t + 1) * d]),
        ] {
            outer_acc(dw, xt, g);
            mat_vec(w, g, &mut tmp);
            axpy(dxt, 1.0, &tmp);
        }
    }

    // Embeddings.
    let mut dcell = vec![0.0; dv];
    for (t, &item) in items.iter().enumerate() {
        let g = &dx[t * d..(t + 1) * d];
        axpy(grads.trunk.pos_emb.row_mut(t), 1.0, g);
        match item {
            InputItem::Token(id) => axpy(grads.trunk.tok_emb.row_mut(id as usize), 1.0, g),
            InputItem::Cell { symbol, row, col } => {
                axpy(&mut grads.connector.bias.data, 1.0, g);
                outer_acc(
                    &mut grads.connector.weight,
                    &c.cell_in[t * dv..(t + 1) * dv],
                    g,
                );
                mat_vec(&view.connector.weight, g, &mut dcell);
                axpy(grads.encoder.cell_emb.row_mut(symbol as usize), 1.0, &dcell);
                let gp = row as usize * h.grid_width + col as usize;
                axpy(grads.encoder.grid_pos.row_mut(gp), 1.0, &dcell);
            }
        }
    }
}

/// Logits row from a final hidden state.
pub(crate) fn project_logits(params: &PolicyParams, h2_t: &[f64], out: &mut [f64]) {
    vec_mat(h2_t, &params.lm.out_proj, out);
}

pub(crate) fn project_logits_backward(
    params: &PolicyParams,
    h2_t: &[f64],
    dlogits: &[f64],
    d_out_proj: &mut Tensor,
    dh2_t: &mut [f64],
) {
    outer_acc(d_out_proj, h2_t, dlogits);
    mat_vec(&params.lm.out_proj, dlogits, dh2_t);
}

pub(crate) fn value_from_hidden(critic: &CriticParams, h2_t: &[f64]) -> f64 {
    dot(h2_t, &critic.value_head.data)
}

/// Full `len x vocab_size` logits. Row `t` depends only on positions `<= t`.
pub fn forward_logits(params: &PolicyParams, items: &[InputItem]) -> Result<Tensor> {
    let cache = trunk_forward(&params.trunk_view(), items)?;
    let (d, vsz) = (params.hyper.d_model, params.hyper.vocab_size);
    let mut out = Tensor::zeros(items.len(), vsz);
    for t in 0..items.len() {
        project_logits(params, &cache.h2[t * d..(t + 1) * d], out.row_mut(t));
    }
    Ok(out)
}

/// Logits of the last position only.
pub fn last_logits(params: &PolicyParams, items: &[InputItem]) -> Result<Vec<f64>> {
    let h2 = trunk_last_hidden(&params.trunk_view(), items)?;
    let mut out = vec![0.0; params.hyper.vocab_size];
    project_logits(params, &h2, &mut out);
    Ok(out)
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

/// Shannon entropy of `softmax(logits)`, in nats.
pub fn entropy(logits: &[f64]) -> f64 {
    let lp = log_softmax(logits);
    let h: f64 = lp
        .iter()
        .filter(|l| l.is_finite())
        .map(|&l| -l.exp() * l)
        .sum();
    h.max(0.0)
}

/// Per-position `log pi(y_t | y_<t)` on response positions, 0 elsewhere.
/// The distribution is the softmax over the action region of the vocabulary.
pub fn logprob_of(
    params: &PolicyParams,
    items: &[InputItem],
    response_mask: &[u8],
) -> Result<Vec<f64>> {
    let logits = forward_logits(params, items)?;
    let a = params.hyper.action_vocab;
    let mut out = vec![0.0; items.len()];
    for (t, &m) in response_mask.iter().enumerate() {
        if m == 0 {
            continue;
        }
        let y = response_token(items, t, a)?;
        out[t] = log_softmax(&logits.row(t - 1)[..a])[y];
    }
    Ok(out)
}

pub(crate) fn response_token(items: &[InputItem], t: usize, action_vocab: usize) -> Result<usize> {
    if t == 0 {
        return Err(Error::Protocol(
            "position 0 cannot be a response position".into(),
        ));
    }
    match items.get(t) {
        Some(&InputItem::Token(id)) if (id as usize) < action_vocab => Ok(id as usize),
        other => Err(Error::Protocol(format!(
            "response position {t} holds {other:?}, not an action token"
        ))),
    }
}

/// Per-position state values `V(prefix up to and including t)`.
pub fn value_of(critic: &CriticParams, items: &[InputItem]) -> Result<Vec<f64>> {
    let cache = trunk_forward(&critic.trunk_view(), items)?;
    let d = critic.hyper.d_model;
    Ok((0..items.len())
        .map(|t| value_from_hidden(critic, &cache.h2[t * d..(t + 1) * d]))
        .collect())
}
