use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape hyperparameters shared by the policy and the critic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hyper {
    pub d_model: usize,
    pub d_visual: usize,
    pub vocab_size: usize,
    /// Tokens `[0, action_vocab)` form the action space; the rest are control tokens.
    pub action_vocab: usize,
    pub num_cell_symbols: usize,
    pub max_len: usize,
    pub grid_height: usize,
    pub grid_width: usize,
}

impl Hyper {
    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.d_model > 0
            && self.d_visual > 0
            && self.action_vocab > 0
            && self.action_vocab <= self.vocab_size
            && self.num_cell_symbols > 0
            && self.max_len > 0
            && self.grid_height > 0
            && self.grid_width > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Schema(format!(
                "inconsistent hyperparameters: {self:?}"
            )))
        }
    }
}

/// Dense row-major matrix (vectors are `1 x n`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn uniform<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        Self {
            rows,
            cols,
            data: (0..rows * cols)
                .map(|_| rng.gen_range(-bound..bound))
                .collect(),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }
}

/// A named collection of tensors that optimizers and checkpoints can walk.
///
/// Gradients use the same type as the parameters they belong to.
pub trait ParamSet: Clone + Send + Sync + 'static {
    /// Tag stored in checkpoint manifests.
    const KIND: &'static str;

    fn hyper(&self) -> &Hyper;
    /// All-zero parameters of the given shape.
    fn blank(hyper: Hyper) -> Result<Self>;
    fn tensors(&self) -> Vec<(&'static str, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = 0.0);
        }
        z
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.data.len()).sum()
    }

    fn size_bytes(&self) -> usize {
        self.num_params() * std::mem::size_of::<f64>()
    }

    fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.data.iter().all(|x| x.is_finite()))
    }

    /// Flat coordinate access in `tensors()` order.
    fn get_flat(&self, mut index: usize) -> f64 {
        for (_, t) in self.tensors() {
            if index < t.data.len() {
                return t.data[index];
            }
            index -= t.data.len();
        }
        panic!("flat index out of range");
    }

    fn set_flat(&mut self, mut index: usize, value: f64) {
        for (_, t) in self.tensors_mut() {
            if index < t.data.len() {
                t.data[index] = value;
                return;
            }
            index -= t.data.len();
        }
        panic!("flat index out of range");
    }

    fn squared_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.data.iter())
            .map(|x| x * x)
            .sum()
    }

    /// `self += alpha * other`; shapes must match.
    fn add_scaled(&mut self, alpha: f64, other: &Self) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += alpha * y;
            }
        }
    }

    fn scale(&mut self, alpha: f64) {
        for (_, t) in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x *= alpha);
        }
    }

    /// Copies values from `source`, refusing mismatched shapes.
    fn load_from(&mut self, source: &Self) -> Result<()> {
        if self.hyper() != source.hyper() {
            return Err(Error::Schema(format!(
                "hyperparameter mismatch: {:?} vs {:?}",
                self.hyper(),
                source.hyper()
            )));
        }
        let src = source.tensors();
        let dst = self.tensors_mut();
        if src.len() != dst.len() {
            return Err(Error::Schema("tensor count mismatch".into()));
        }
        for ((name, d), (sname, s)) in dst.into_iter().zip(src) {
            if name != sname || d.shape() != s.shape() {
                return Err(Error::Schema(format!(
                    "tensor `{name}` {:?} cannot take `{sname}` {:?}",
                    d.shape(),
                    s.shape()
                )));
            }
            d.data.copy_from_slice(&s.data);
        }
        Ok(())
    }
}

/// Language-model trunk shared in shape by policy and critic: token and
/// position tables, one single-head causal attention block and a two-layer
/// ReLU feed-forward, both residual.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trunk {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ff_in: Tensor,
    pub ff_in_bias: Tensor,
    pub ff_out: Tensor,
    pub ff_out_bias: Tensor,
}

/// Grid encoder: per-symbol embedding plus a 2-D position table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub cell_emb: Tensor,
    pub grid_pos: Tensor,
}

/// Affine map from encoder space into the model width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Connector {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Language model = trunk + output projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageModel {
    pub trunk: Trunk,
    pub out_proj: Tensor,
}

/// Policy parameters split into language model, grid encoder and connector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub hyper: Hyper,
    pub lm: LanguageModel,
    pub encoder: Encoder,
    pub connector: Connector,
}

/// State-value network with its own storage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticParams {
    pub hyper: Hyper,
    pub trunk: Trunk,
    pub encoder: Encoder,
    pub connector: Connector,
    pub value_head: Tensor,
}

const INIT_BOUND: f64 = 0.08;

impl Trunk {
    fn init<R: Rng>(h: &Hyper, rng: &mut R) -> Self {
        let d = h.d_model;
        let mut u = |r, c| Tensor::uniform(r, c, INIT_BOUND, rng);
        Self {
            tok_emb: u(h.vocab_size, d),
            pos_emb: u(h.max_len, d),
            w_q: u(d, d),
            w_k: u(d, d),
            w_v: u(d, d),
            w_o: u(d, d),
            ff_in: u(d, h.d_ff()),
            ff_in_bias: Tensor::zeros(1, h.d_ff()),
            ff_out: u(h.d_ff(), d),
            ff_out_bias: Tensor::zeros(1, d),
        }
    }

    fn tensors(&self) -> [(&'static str, &Tensor); 10] {
        [
            ("tok_emb", &self.tok_emb),
            ("pos_emb", &self.pos_emb),
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
            ("ff_in", &self.ff_in),
            ("ff_in_bias", &self.ff_in_bias),
            ("ff_out", &self.ff_out),
            ("ff_out_bias", &self.ff_out_bias),
        ]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 10] {
        [
            ("tok_emb", &mut self.tok_emb),
            ("pos_emb", &mut self.pos_emb),
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
            ("w_o", &mut self.w_o),
            ("ff_in", &mut self.ff_in),
            ("ff_in_bias", &mut self.ff_in_bias),
            ("ff_out", &mut self.ff_out),
            ("ff_out_bias", &mut self.ff_out_bias),
        ]
    }
}

impl Encoder {
    fn init<R: Rng>(h: &Hyper, rng: &mut R) -> Self {
        Self {
            cell_emb: Tensor::uniform(h.num_cell_symbols, h.d_visual, INIT_BOUND, rng),
            grid_pos: Tensor::uniform(h.grid_height * h.grid_width, h.d_visual, INIT_BOUND, rng),
        }
    }
}

impl Connector {
    fn init<R: Rng>(h: &Hyper, rng: &mut R) -> Self {
        Self {
            weight: Tensor::uniform(h.d_visual, h.d_model, INIT_BOUND, rng),
            bias: Tensor::zeros(1, h.d_model),
        }
    }
}

impl PolicyParams {
    /// Seeded uniform(-0.08, 0.08) initialisation; the output projection is
    /// further scaled by `1/sqrt(d_model)`. Biases start at zero.
    pub fn init(hyper: Hyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let mut rng = crate::rng::stream(seed, &[crate::rng::tag::INIT_POLICY]);
        let trunk = Trunk::init(&hyper, &mut rng);
        let mut out_proj = Tensor::uniform(hyper.d_model, hyper.vocab_size, INIT_BOUND, &mut rng);
        let s = 1.0 / (hyper.d_model as f64).sqrt();
        out_proj.data.iter_mut().for_each(|x| *x *= s);
        let encoder = Encoder::init(&hyper, &mut rng);
        let connector = Connector::init(&hyper, &mut rng);
        Ok(Self {
            hyper,
            lm: LanguageModel { trunk, out_proj },
            encoder,
            connector,
        })
    }

    /// Frozen, independent copy.
    pub fn snapshot(&self) -> PolicyParams {
        self.clone()
    }
}

impl CriticParams {
    /// Same trunk initialisation as the policy; the value head starts at zero.
    pub fn init(hyper: Hyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let mut rng = crate::rng::stream(seed, &[crate::rng::tag::INIT_CRITIC]);
        let trunk = Trunk::init(&hyper, &mut rng);
        let encoder = Encoder::init(&hyper, &mut rng);
        let connector = Connector::init(&hyper, &mut rng);
        Ok(Self {
            hyper,
            trunk,
            encoder,
            connector,
            value_head: Tensor::zeros(hyper.d_model, 1),
        })
    }
}

impl ParamSet for PolicyParams {
    const KIND: &'static str = "policy";

    fn blank(hyper: Hyper) -> Result<Self> {
        Ok(Self::init(hyper, 0)?.zeros_like())
    }

    fn hyper(&self) -> &Hyper {
        &self.hyper
    }

    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v: Vec<_> = self.lm.trunk.tensors().into_iter().collect();
        v.push(("out_proj", &self.lm.out_proj));
        v.push(("cell_emb", &self.encoder.cell_emb));
        v.push(("grid_pos", &self.encoder.grid_pos));
        v.push(("conn_weight", &self.connector.weight));
        v.push(("conn_bias", &self.connector.bias));
        v
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut v: Vec<_> = self.lm.trunk.tensors_mut().into_iter().collect();
        v.push(("out_proj", &mut self.lm.out_proj));
        v.push(("cell_emb", &mut self.encoder.cell_emb));
        v.push(("grid_pos", &mut self.encoder.grid_pos));
        v.push(("conn_weight", &mut self.connector.weight));
        v.push(("conn_bias", &mut self.connector.bias));
        v
    }
}

impl ParamSet for CriticParams {
    const KIND: &'static str = "critic";

    fn blank(hyper: Hyper) -> Result<Self> {
        Ok(Self::init(hyper, 0)?.zeros_like())
    }

    fn hyper(&self) -> &Hyper {
        &self.hyper
    }

    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v: Vec<_> = self.trunk.tensors().into_iter().collect();
        v.push(("cell_emb", &self.encoder.cell_emb));
        v.push(("grid_pos", &self.encoder.grid_pos));
        v.push(("conn_weight", &self.connector.weight));
        v.push(("conn_bias", &self.connector.bias));
        v.push(("value_head", &self.value_head));
        v
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut v: Vec<_> = self.trunk.tensors_mut().into_iter().collect();
        v.push(("cell_emb", &mut self.encoder.cell_emb));
        v.push(("grid_pos", &mut self.encoder.grid_pos));
        v.push(("conn_weight", &mut self.connector.weight));
        v.push(("conn_bias", &mut self.connector.bias));
        v.push(("value_head", &mut self.value_head));
        v
    }
}

/// `load_into(target, source)`: overwrite `target` with `source`'s values.
pub fn load_into<P: ParamSet>(target: &mut P, source: &P) -> Result<()> {
    target.load_from(source)
}
