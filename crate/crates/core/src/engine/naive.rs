//! A second, deliberately naive inference backend: weights are cast to
//! `f32` and every step recomputes the whole sequence with textbook loops.
//! It shares only the decoding rules with the policy module, which makes it
//! useful for checking that training never depends on one backend's
//! numerics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::inference::{GenerationRequest, InferenceEngine, Lifecycle};
use crate::error::{Error, Result};
use crate::policy::{decode, Generation, Hyper, PolicyParams, SamplingConfig, Tensor};
use crate::proto::InputItem;

struct Mat {
    rows: usize,
    cols: usize,
    w: Vec<f32>,
}

impl Mat {
    fn from(t: &Tensor) -> Self {
        Self {
            rows: t.rows,
            cols: t.cols,
            w: t.data.iter().map(|&x| x as f32).collect(),
        }
    }

    fn at(&self, r: usize, c: usize) -> f32 {
        self.w[r * self.cols + c]
    }

    /// `x * M` for a row vector `x`.
    fn apply(&self, x: &[f32]) -> Vec<f32> {
        (0..self.cols)
            .map(|c| (0..self.rows).map(|r| x[r] * self.at(r, c)).sum())
            .collect()
    }
}

struct Weights {
    hyper: Hyper,
    tok: Mat,
    pos: Mat,
    wq: Mat,
    wk: Mat,
    wv: Mat,
    wo: Mat,
    f1: Mat,
    b1: Mat,
    f2: Mat,
    b2: Mat,
    out: Mat,
    cell: Mat,
    grid: Mat,
    cw: Mat,
    cb: Mat,
}

impl Weights {
    fn from(p: &PolicyParams) -> Self {
        let t = &p.lm.trunk;
        Self {
            hyper: p.hyper,
            tok: Mat::from(&t.tok_emb),
            pos: Mat::from(&t.pos_emb),
            wq: Mat::from(&t.w_q),
            wk: Mat::from(&t.w_k),
            wv: Mat::from(&t.w_v),
            wo: Mat::from(&t.w_o),
            f1: Mat::from(&t.ff_in),
            b1: Mat::from(&t.ff_in_bias),
            f2: Mat::from(&t.ff_out),
            b2: Mat::from(&t.ff_out_bias),
            out: Mat::from(&p.lm.out_proj),
            cell: Mat::from(&p.encoder.cell_emb),
            grid: Mat::from(&p.encoder.grid_pos),
            cw: Mat::from(&p.connector.weight),
            cb: Mat::from(&p.connector.bias),
        }
    }

    fn bytes(&self) -> usize {
        [
            &self.tok, &self.pos, &self.wq, &self.wk, &self.wv, &self.wo, &self.f1, &self.b1,
            &self.f2, &self.b2, &self.out, &self.cell, &self.grid, &self.cw, &self.cb,
        ]
        .iter()
        .map(|m| m.w.len() * std::mem::size_of::<f32>())
        .sum()
    }

    fn embed(&self, t: usize, item: InputItem) -> Result<Vec<f32>> {
        let d = self.hyper.d_model;
        let mut x: Vec<f32> = (0..d).map(|j| self.pos.at(t, j)).collect();
        match item {
            InputItem::Token(id) => {
                let id = id as usize;
                if id >= self.hyper.vocab_size {
                    return Err(Error::Dimension(format!("token {id} outside vocabulary")));
                }
                for (j, xj) in x.iter_mut().enumerate() {
                    *xj += self.tok.at(id, j);
                }
            }
            InputItem::Cell { symbol, row, col } => {
                let (s, g) = (
                    symbol as usize,
                    row as usize * self.hyper.grid_width + col as usize,
                );
                if s >= self.hyper.num_cell_symbols || g >= self.grid.rows {
                    return Err(Error::Dimension(format!(
                        "cell ({row},{col}) symbol {symbol} out of range"
                    )));
                }
                let e: Vec<f32> = (0..self.hyper.d_visual)
                    .map(|k| self.cell.at(s, k) + self.grid.at(g, k))
                    .collect();
                let proj = self.cw.apply(&e);
                for j in 0..d {
                    x[j] += proj[j] + self.cb.at(0, j);
                }
            }
        }
        Ok(x)
    }

    /// Normalised log-probabilities over the action tokens after `items`.
    fn next_logprobs(&self, items: &[InputItem]) -> Result<Vec<f64>> {
        let h = &self.hyper;
        if items.len() > h.max_len {
            return Err(Error::Capacity {
                len: items.len(),
                max_len: h.max_len,
            });
        }
        let d = h.d_model;
        let xs: Vec<Vec<f32>> = items
            .iter()
            .enumerate()
            .map(|(t, &it)| self.embed(t, it))
            .collect::<Result<_>>()?;
        let qs: Vec<Vec<f32>> = xs.iter().map(|x| self.wq.apply(x)).collect();
        let ks: Vec<Vec<f32>> = xs.iter().map(|x| self.wk.apply(x)).collect();
        let vs: Vec<Vec<f32>> = xs.iter().map(|x| self.wv.apply(x)).collect();
        let scale = 1.0 / (d as f32).sqrt();
        let mut last = Vec::new();
        for t in 0..items.len() {
            let scores: Vec<f32> = (0..=t)
                .map(|j| (0..d).map(|c| qs[t][c] * ks[j][c]).sum::<f32>() * scale)
                .collect();
            let m = scores.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let e: Vec<f32> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f32 = e.iter().sum();
            let mixed: Vec<f32> = (0..d)
                .map(|c| (0..=t).map(|j| e[j] / z * vs[j][c]).sum())
                .collect();
            let o = self.wo.apply(&mixed);
            let h1: Vec<f32> = (0..d).map(|c| xs[t][c] + o[c]).collect();
            let u: Vec<f32> = self
                .f1
                .apply(&h1)
                .iter()
                .enumerate()
                .map(|(c, v)| (v + self.b1.at(0, c)).max(0.0))
                .collect();
            let f = self.f2.apply(&u);
            last = (0..d).map(|c| h1[c] + f[c] + self.b2.at(0, c)).collect();
        }
        let logits: Vec<f32> = self.out.apply(&last)[..h.action_vocab].to_vec();
        let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f32>().ln();
        Ok(logits.iter().map(|&z| f64::from(z - lse)).collect())
    }
}

#[derive(Default)]
pub struct NaiveF32Engine {
    life: Lifecycle<Weights>,
}

impl NaiveF32Engine {
    pub fn new() -> Self {
        Self::default()
    }
}

impl InferenceEngine for NaiveF32Engine {
    fn name(&self) -> &'static str {
        "naive_f32"
    }

    fn sync_weights(&mut self, params: &PolicyParams) -> Result<()> {
        self.life.sync(params, Weights::from);
        Ok(())
    }

    fn load(&mut self) -> Result<()> {
        self.life.load(Weights::from)
    }

    fn offload(&mut self) -> Result<()> {
        self.life.offload();
        Ok(())
    }

    fn is_loaded(&self) -> bool {
        self.life.resident.is_some()
    }

    fn resident_bytes(&self) -> usize {
        self.life.resident.as_ref().map_or(0, Weights::bytes)
    }

    fn generate(
        &self,
        requests: &[GenerationRequest],
        cfg: &SamplingConfig,
    ) -> Result<Vec<Generation>> {
        let w = self.life.resident()?;
        requests
            .iter()
            .map(|r| {
                let mut rng = ChaCha8Rng::seed_from_u64(r.seed);
                decode(&r.prefix, cfg, &mut rng, w.hyper.max_len, |items| {
                    w.next_logprobs(items)
                })
            })
            .collect()
    }
}
