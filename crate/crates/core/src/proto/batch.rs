use std::collections::BTreeMap;

use super::{State, Trajectory};
use crate::error::{Error, Result};

/// Well-known numeric field names.
pub mod field {
    pub const TOKEN_IDS: &str = "token_ids";
    pub const RESPONSE_MASK: &str = "response_mask";
    pub const ATTENTION_MASK: &str = "attention_mask";
    pub const SAMPLED_LOGPROBS: &str = "sampled_logprobs";
    pub const OLD_LOGPROBS: &str = "old_logprobs";
    pub const REF_LOGPROBS: &str = "ref_logprobs";
    pub const REWARDS: &str = "rewards";
    pub const ADVANTAGES: &str = "advantages";
    pub const RETURNS: &str = "returns";
    pub const VALUES: &str = "values";

    /// Per-row scalars.
    pub const TOTAL_REWARD: &str = "total_reward";
    pub const TURN_COUNT: &str = "turn_count";
    pub const GREEDY_REWARD: &str = "greedy_reward";
}

/// A `[rows, max_len]` array, right-padded with `pad`.
#[derive(Clone, Debug, PartialEq)]
pub struct NumericField {
    pub pad: f64,
    pub data: Vec<f64>,
}

/// The cross-stage data protocol.
///
/// Numeric fields are rectangular `[rows, max_len]` arrays keyed by name.
/// Everything else is a per-row list. `attention_mask` is authoritative for
/// sequence length; nothing downstream infers length from pad ids.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryBatch {
    rows: usize,
    max_len: usize,
    numeric: BTreeMap<String, NumericField>,
    pub states: Vec<State>,
    pub reward_components: Vec<BTreeMap<String, f64>>,
    pub group_ids: Vec<u64>,
    pub prompt_ids: Vec<u64>,
    pub rng_seeds: Vec<u64>,
    pub row_values: BTreeMap<String, Vec<f64>>,
}

pub fn make_batch(trajectories: &[Trajectory], pad_value: u32) -> Result<TrajectoryBatch> {
    if trajectories.is_empty() {
        return Err(Error::EmptyInput(
            "make_batch needs at least one trajectory".into(),
        ));
    }
    let rows = trajectories.len();
    let max_len = trajectories
        .iter()
        .map(|t| t.flat_tokens.len())
        .max()
        .unwrap_or(0);
    let mut tokens = vec![f64::from(pad_value); rows * max_len];
    let mut response = vec![0.0; rows * max_len];
    let mut attention = vec![0.0; rows * max_len];
    let mut sampled = vec![0.0; rows * max_len];
    for (r, t) in trajectories.iter().enumerate() {
        let base = r * max_len;
        for (i, &tok) in t.flat_tokens.iter().enumerate() {
            tokens[base + i] = f64::from(tok);
            attention[base + i] = 1.0;
            response[base + i] = f64::from(t.response_mask[i]);
            sampled[base + i] = t.sampled_logprobs[i];
        }
    }
    let mut numeric = BTreeMap::new();
    numeric.insert(
        field::TOKEN_IDS.to_string(),
        NumericField {
            pad: f64::from(pad_value),
            data: tokens,
        },
    );
    for (name, data) in [
        (field::RESPONSE_MASK, response),
        (field::ATTENTION_MASK, attention),
        (field::SAMPLED_LOGPROBS, sampled),
    ] {
        numeric.insert(name.to_string(), NumericField { pad: 0.0, data });
    }
    let mut row_values = BTreeMap::new();
    row_values.insert(
        field::TOTAL_REWARD.to_string(),
        trajectories.iter().map(|t| t.total_reward).collect(),
    );
    row_values.insert(
        field::TURN_COUNT.to_string(),
        trajectories.iter().map(|t| t.turn_count as f64).collect(),
    );
    Ok(TrajectoryBatch {
        rows,
        max_len,
        numeric,
        states: trajectories.iter().map(|t| t.final_state.clone()).collect(),
        reward_components: trajectories
            .iter()
            .map(|t| t.reward_components.clone())
            .collect(),
        group_ids: trajectories.iter().map(|t| t.group_id).collect(),
        prompt_ids: trajectories.iter().map(|t| t.prompt_id).collect(),
        rng_seeds: trajectories.iter().map(|t| t.rng_seed).collect(),
        row_values,
    })
}

pub fn select_rows(batch: &TrajectoryBatch, indices: &[usize]) -> Result<TrajectoryBatch> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= batch.rows) {
        return Err(Error::Protocol(format!(
            "row index {bad} out of range for batch of {}",
            batch.rows
        )));
    }
    let max_len = batch.max_len;
    let numeric = batch
        .numeric
        .iter()
        .map(|(name, f)| {
            let mut data = Vec::with_capacity(indices.len() * max_len);
            for &i in indices {
                data.extend_from_slice(&f.data[i * max_len..(i + 1) * max_len]);
            }
            (name.clone(), NumericField { pad: f.pad, data })
        })
        .collect();
    let pick = |v: &[u64]| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
    Ok(TrajectoryBatch {
        rows: indices.len(),
        max_len,
        numeric,
        states: indices.iter().map(|&i| batch.states[i].clone()).collect(),
        reward_components: indices
            .iter()
            .map(|&i| batch.reward_components[i].clone())
            .collect(),
        group_ids: pick(&batch.group_ids),
        prompt_ids: pick(&batch.prompt_ids),
        rng_seeds: pick(&batch.rng_seeds),
        row_values: batch
            .row_values
            .iter()
            .map(|(k, v)| (k.clone(), indices.iter().map(|&i| v[i]).collect()))
            .collect(),
    })
}

/// Stacks batches row-wise, re-padding every row to the longest `max_len`.
pub fn concat_batches(batches: &[TrajectoryBatch]) -> Result<TrajectoryBatch> {
    let first = batches
        .first()
        .ok_or_else(|| Error::EmptyInput("concat_batches needs at least one batch".into()))?;
    for b in &batches[1..] {
        let same_numeric = b.numeric.len() == first.numeric.len()
            && b.numeric
                .iter()
                .zip(&first.numeric)
                .all(|((n1, f1), (n2, f2))| n1 == n2 && f1.pad.to_bits() == f2.pad.to_bits());
        let same_rows = b.row_values.keys().eq(first.row_values.keys());
        if !same_numeric || !same_rows {
            return Err(Error::Protocol(
                "cannot concatenate batches with different field schemas".into(),
            ));
        }
    }
    let max_len = batches.iter().map(|b| b.max_len).max().unwrap_or(0);
    let rows: usize = batches.iter().map(|b| b.rows).sum();
    let mut numeric = BTreeMap::new();
    for (name, f) in &first.numeric {
        let mut data = Vec::with_capacity(rows * max_len);
        for b in batches {
            let src = &b.numeric[name];
            for r in 0..b.rows {
                data.extend_from_slice(&src.data[r * b.max_len..(r + 1) * b.max_len]);
                data.extend(std::iter::repeat(f.pad).take(max_len - b.max_len));
            }
        }
        numeric.insert(name.clone(), NumericField { pad: f.pad, data });
    }
    let mut out = TrajectoryBatch {
        rows,
        max_len,
        numeric,
        states: Vec::with_capacity(rows),
        reward_components: Vec::with_capacity(rows),
        group_ids: Vec::with_capacity(rows),
        prompt_ids: Vec::with_capacity(rows),
        rng_seeds: Vec::with_capacity(rows),
        row_values: first
            .row_values
            .keys()
            .map(|k| (k.clone(), Vec::new()))
            .collect(),
    };
    for b in batches {
        out.states.extend(b.states.iter().cloned());
        out.reward_components
            .extend(b.reward_components.iter().cloned());
        out.group_ids.extend_from_slice(&b.group_ids);
        out.prompt_ids.extend_from_slice(&b.prompt_ids);
        out.rng_seeds.extend_from_slice(&b.rng_seeds);
        for (k, v) in &b.row_values {
            out.row_values
                .get_mut(k)
                .expect("schema checked")
                .extend_from_slice(v);
        }
    }
    Ok(out)
}

impl TrajectoryBatch {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn has(&self, name: &str) -> bool {
        self.numeric.contains_key(name)
    }

    pub fn field_names(&self) -> impl Iterator<Item = &str> {
        self.numeric.keys().map(String::as_str)
    }

    pub fn field(&self, name: &str) -> Result<&NumericField> {
        self.numeric
            .get(name)
            .ok_or_else(|| Error::MissingField(name.to_string()))
    }

    pub fn data(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.field(name)?.data)
    }

    pub fn row(&self, name: &str, r: usize) -> Result<&[f64]> {
        let data = self.data(name)?;
        Ok(&data[r * self.max_len..(r + 1) * self.max_len])
    }

    /// Inserts or replaces a numeric field. Padding positions are forced to `pad`.
    pub fn set_field(&mut self, name: &str, pad: f64, mut data: Vec<f64>) -> Result<()> {
        if data.len() != self.rows * self.max_len {
            return Err(Error::Protocol(format!(
                "field `{name}` has {} entries, expected {}x{}",
                data.len(),
                self.rows,
                self.max_len
            )));
        }
        if let Some(att) = self.numeric.get(field::ATTENTION_MASK) {
            for (v, &a) in data.iter_mut().zip(&att.data) {
                if a == 0.0 {
                    *v = pad;
                }
            }
        }
        self.numeric
            .insert(name.to_string(), NumericField { pad, data });
        Ok(())
    }

    pub fn remove_field(&mut self, name: &str) -> Option<NumericField> {
        self.numeric.remove(name)
    }

    pub fn row_values(&self, name: &str) -> Result<&[f64]> {
        self.row_values
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingField(name.to_string()))
    }

    pub fn set_row_values(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if values.len() != self.rows {
            return Err(Error::Protocol(format!(
                "row field `{name}` has {} entries for {} rows",
                values.len(),
                self.rows
            )));
        }
        self.row_values.insert(name.to_string(), values);
        Ok(())
    }

    /// Valid (unpadded) length of row `r`.
    pub fn row_len(&self, r: usize) -> usize {
        self.row(field::ATTENTION_MASK, r)
            .map(|m| m.iter().filter(|&&a| a != 0.0).count())
            .unwrap_or(0)
    }

    /// Number of actor-generated positions in row `r`.
    pub fn response_len(&self, r: usize) -> usize {
        self.row(field::RESPONSE_MASK, r)
            .map(|m| m.iter().filter(|&&a| a != 0.0).count())
            .unwrap_or(0)
    }

    /// Row tokens with padding dropped.
    pub fn unflatten_row(&self, r: usize) -> Result<Vec<u32>> {
        let toks = self.row(field::TOKEN_IDS, r)?;
        let att = self.row(field::ATTENTION_MASK, r)?;
        Ok(toks
            .iter()
            .zip(att)
            .filter(|(_, &a)| a != 0.0)
            .map(|(&t, _)| t as u32)
            .collect())
    }

    /// Position of the last actor-generated token in row `r`.
    pub fn last_response_position(&self, r: usize) -> Option<usize> {
        self.row(field::RESPONSE_MASK, r)
            .ok()?
            .iter()
            .rposition(|&m| m != 0.0)
    }
}
