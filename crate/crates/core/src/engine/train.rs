use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{load_params, save_params, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub grad_clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip_norm: Some(1.0),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.grad_clip_norm.map_or(true, |c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid optimizer settings: {self:?}"
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<P> {
    pub step: u64,
    pub m: P,
    pub v: P,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub grad_norm_pre_clip: f64,
    pub applied_lr: f64,
}

/// Owns one parameter set and its optimizer.
pub trait TrainEngine<P: ParamSet> {
    /// Binds parameters; a second call is a lifecycle error.
    fn prepare(&mut self, params: P, cfg: OptimizerConfig) -> Result<()>;
    fn unwrap(&self) -> Result<&P>;
    /// Clips by global norm, then applies one optimizer update.
    fn step(&mut self, grads: &P) -> Result<StepStats>;
    fn optimizer_state(&self) -> Result<&OptimizerState<P>>;
    fn save_checkpoint(&self, dir: &Path) -> Result<()>;
    /// Replaces parameters and optimizer state with a saved checkpoint.
    fn restore(&mut self, dir: &Path) -> Result<()>;
}

struct Bound<P> {
    params: P,
    cfg: OptimizerConfig,
    state: OptimizerState<P>,
}

/// Reference train engine running plain `f64` updates in process.
pub struct InProcessTrainer<P> {
    bound: Option<Bound<P>>,
}

impl<P: ParamSet> Default for InProcessTrainer<P> {
    fn default() -> Self {
        Self { bound: None }
    }
}

impl<P: ParamSet> InProcessTrainer<P> {
    pub fn new() -> Self {
        Self::default()
    }

    /// `new` followed by `prepare`.
    pub fn prepared(params: P, cfg: OptimizerConfig) -> Result<Self> {
        let mut t = Self::new();
        t.prepare(params, cfg)?;
        Ok(t)
    }

    fn bound(&self) -> Result<&Bound<P>> {
        self.bound
            .as_ref()
            .ok_or_else(|| Error::Lifecycle("train engine used before prepare".into()))
    }

    pub fn config(&self) -> Result<&OptimizerConfig> {
        Ok(&self.bound()?.cfg)
    }
}

#[derive(Serialize, Deserialize)]
struct OptimizerFile {
    format_version: u32,
    config: OptimizerConfig,
    step: u64,
}

impl<P: ParamSet> TrainEngine<P> for InProcessTrainer<P> {
    fn prepare(&mut self, params: P, cfg: OptimizerConfig) -> Result<()> {
        if self.bound.is_some() {
            return Err(Error::Lifecycle("train engine is already prepared".into()));
        }
        cfg.validate()?;
        if !params.all_finite() {
            return Err(Error::Numeric(
                "refusing to prepare non-finite parameters".into(),
            ));
        }
        let zeros = params.zeros_like();
        self.bound = Some(Bound {
            state: OptimizerState {
                step: 0,
                m: zeros.clone(),
                v: zeros,
            },
            params,
            cfg,
        });
        Ok(())
    }

    fn unwrap(&self) -> Result<&P> {
        Ok(&self.bound()?.params)
    }

    fn step(&mut self, grads: &P) -> Result<StepStats> {
        let b = self
            .bound
            .as_mut()
            .ok_or_else(|| Error::Lifecycle("train engine used before prepare".into()))?;
        if grads.hyper() != b.params.hyper() {
            return Err(Error::Schema(
                "gradient shape does not match parameters".into(),
            ));
        }
        if !grads.all_finite() {
            return Err(Error::Numeric("non-finite gradient; step rejected".into()));
        }
        let norm = grads.squared_norm().sqrt();
        let scale = match b.cfg.grad_clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let lr = b.cfg.lr;
        match b.cfg.kind {
            OptimizerKind::Sgd => {
                for ((_, p), (_, g)) in b.params.tensors_mut().into_iter().zip(grads.tensors()) {
                    for (x, &gx) in p.data.iter_mut().zip(&g.data) {
                        *x -= lr * (gx * scale);
                    }
                }
            }
            OptimizerKind::Adam => {
                let st = &mut b.state;
                st.step += 1;
                let (b1, b2, eps) = (b.cfg.beta1, b.cfg.beta2, b.cfg.eps);
                let c1 = 1.0 - b1.powi(st.step as i32);
                let c2 = 1.0 - b2.powi(st.step as i32);
                for ((((_, p), (_, g)), (_, m)), (_, v)) in b
                    .params
                    .tensors_mut()
                    .into_iter()
                    .zip(grads.tensors())
                    .zip(st.m.tensors_mut())
                    .zip(st.v.tensors_mut())
                {
                    for i in 0..p.data.len() {
                        let gx = g.data[i] * scale;
                        m.data[i] = b1 * m.data[i] + (1.0 - b1) * gx;
                        v.data[i] = b2 * v.data[i] + (1.0 - b2) * gx * gx;
                        let mh = m.data[i] / c1;
                        let vh = v.data[i] / c2;
                        p.data[i] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        Ok(StepStats {
            grad_norm_pre_clip: norm,
            applied_lr: lr,
        })
    }

    fn optimizer_state(&self) -> Result<&OptimizerState<P>> {
        Ok(&self.bound()?.state)
    }

    fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let b = self.bound()?;
        save_params(&dir.join("params"), &b.params, serde_json::Value::Null)?;
        save_params(&dir.join("adam_m"), &b.state.m, serde_json::Value::Null)?;
        save_params(&dir.join("adam_v"), &b.state.v, serde_json::Value::Null)?;
        let file = OptimizerFile {
            format_version: crate::policy::FORMAT_VERSION,
            config: b.cfg.clone(),
            step: b.state.step,
        };
        let path = dir.join("optimizer.json");
        fs::write(&path, serde_json::to_vec_pretty(&file)?).map_err(|e| Error::io(&path, e))
    }

    fn restore(&mut self, dir: &Path) -> Result<()> {
        let (params, state, cfg) = load_checkpoint::<P>(dir)?;
        if let Some(b) = &self.bound {
            if b.params.hyper() != params.hyper() {
                return Err(Error::Schema(
                    "checkpoint shape differs from the bound parameters".into(),
                ));
            }
        }
        self.bound = Some(Bound { params, cfg, state });
        Ok(())
    }
}

/// Reads a directory written by [`TrainEngine::save_checkpoint`].
pub fn load_checkpoint<P: ParamSet>(dir: &Path) -> Result<(P, OptimizerState<P>, OptimizerConfig)> {
    let path = dir.join("optimizer.json");
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let file: OptimizerFile = serde_json::from_slice(&text)?;
    if file.format_version != crate::policy::FORMAT_VERSION {
        return Err(Error::Version {
            found: file.format_version,
            expected: crate::policy::FORMAT_VERSION,
        });
    }
    let (params, _) = load_params::<P>(&dir.join("params"))?;
    let (m, _) = load_params::<P>(&dir.join("adam_m"))?;
    let (v, _) = load_params::<P>(&dir.join("adam_v"))?;
    if m.hyper() != params.hyper() || v.hyper() != params.hyper() {
        return Err(Error::Schema(
            "optimizer moments do not match parameters".into(),
        ));
    }
    Ok((
        params,
        OptimizerState {
            step: file.step,
            m,
            v,
        },
        file.config,
    ))
}
