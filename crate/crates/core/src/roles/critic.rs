use serde::{Deserialize, Serialize};

use super::{batch_inputs, to_field};
use crate::engine::TrainEngine;
use crate::error::{Error, Result};
use crate::policy::{value_grad, value_of, CriticParams};
use crate::proto::{field, PlaceholderPolicy, TrajectoryBatch};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CriticStats {
    pub value_loss: f64,
    pub grad_norm: f64,
}

/// State-value critic. The value attached to response position `t` is the
/// critic's estimate for the prefix ending at `t - 1`, i.e. the state in
/// which token `t` was chosen.
pub struct Critic {
    engine: Box<dyn TrainEngine<CriticParams> + Send>,
    pub value_clip: Option<f64>,
    pub placeholder: PlaceholderPolicy,
}

impl Critic {
    pub fn new(
        engine: Box<dyn TrainEngine<CriticParams> + Send>,
        value_clip: Option<f64>,
        placeholder: PlaceholderPolicy,
    ) -> Self {
        Self {
            engine,
            value_clip,
            placeholder,
        }
    }

    pub fn params(&self) -> Result<&CriticParams> {
        self.engine.unwrap()
    }

    pub fn engine(&self) -> &dyn TrainEngine<CriticParams> {
        self.engine.as_ref()
    }

    pub fn engine_mut(&mut self) -> &mut (dyn TrainEngine<CriticParams> + Send) {
        self.engine.as_mut()
    }

    pub fn compute_values(&self, batch: &mut TrajectoryBatch) -> Result<()> {
        let params = self.engine.unwrap()?;
        let rows = batch_inputs(batch, &self.placeholder)?
            .iter()
            .map(|f| {
                let v = value_of(params, &f.items)?;
                Ok(f.response_mask
                    .iter()
                    .enumerate()
                    .map(|(t, &m)| if m == 1 { v[t - 1] } else { 0.0 })
                    .collect())
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        batch.set_field(field::VALUES, 0.0, to_field(&rows, batch.max_len()))
    }

    /// Masked mean squared error between values and returns, optionally
    /// clipped around the values stored in the batch.
    pub fn update(&mut self, minibatch: &TrajectoryBatch) -> Result<CriticStats> {
        let width = minibatch.max_len();
        let returns = minibatch.data(field::RETURNS)?;
        let mask = minibatch.data(field::RESPONSE_MASK)?;
        let old_values = match self.value_clip {
            Some(_) => Some(minibatch.data(field::VALUES)?),
            None => None,
        };
        let count: f64 = mask.iter().sum();
        if count == 0.0 {
            return Err(Error::Degenerate("critic update over an empty mask".into()));
        }
        let inputs = batch_inputs(minibatch, &self.placeholder)?;
        let seqs: Vec<&[_]> = inputs.iter().map(|f| f.items.as_slice()).collect();
        let clip = self.value_clip;
        let (loss, grads) = value_grad(self.engine.unwrap()?, &seqs, |values| {
            let mut loss = 0.0;
            let mut grads = Vec::with_capacity(values.len());
            for (r, v) in values.iter().enumerate() {
                let mut g = vec![0.0; v.len()];
                for t in 1..v.len() {
                    let i = r * width + t;
                    if mask[i] == 0.0 {
                        continue;
                    }
                    let pred = v[t - 1];
                    let err = pred - returns[i];
                    let (l, d) = match (clip, old_values) {
                        (Some(eps), Some(old)) => {
                            let clipped = old[i] + (pred - old[i]).clamp(-eps, eps);
                            let cerr = clipped - returns[i];
                            let inside = (pred - old[i]).abs() <= eps;
                            if cerr * cerr > err * err {
                                (cerr * cerr, if inside { 2.0 * cerr } else { 0.0 })
                            } else {
                                (err * err, 2.0 * err)
                            }
                        }
                        _ => (err * err, 2.0 * err),
                    };
                    loss += l / count;
                    g[t - 1] += d / count;
                }
                grads.push(g);
            }
            Ok((loss, grads))
        })?;
        let st = self.engine.step(&grads)?;
        Ok(CriticStats {
            value_loss: loss,
            grad_norm: st.grad_norm_pre_clip,
        })
    }
}
