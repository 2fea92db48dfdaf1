//! Domain types shared by every stage, plus the batch protocol that carries
//! trajectories between them.

mod batch;
mod dump;
mod flatten;
mod vocab;

pub use batch::{concat_batches, field, make_batch, select_rows, NumericField, TrajectoryBatch};
pub use dump::DumpRecord;
pub use flatten::{flatten_state, FlatState, InputItem, PlaceholderPolicy};
pub use vocab::Vocab;

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// A row-major grid of cell symbols, the synthetic stand-in for an image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<u32>,
}

impl Observation {
    pub fn new(height: usize, width: usize, cells: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "observation must be non-empty, got {height}x{width}"
            )));
        }
        if cells.len() != height * width {
            return Err(Error::Dimension(format!(
                "observation {height}x{width} needs {} cells, got {}",
                height * width,
                cells.len()
            )));
        }
        Ok(Self {
            height,
            width,
            cells,
        })
    }

    pub fn filled(height: usize, width: usize, symbol: u32) -> Self {
        Self {
            height,
            width,
            cells: vec![symbol; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.cells[row * self.width + col]
    }

    pub fn validate(&self, num_cell_symbols: u32) -> Result<()> {
        if self.cells.len() != self.height * self.width {
            return Err(Error::Dimension(format!(
                "observation {}x{} carries {} cells",
                self.height,
                self.width,
                self.cells.len()
            )));
        }
        if let Some(bad) = self.cells.iter().find(|&&c| c >= num_cell_symbols) {
            return Err(Error::Dimension(format!(
                "cell symbol {bad} out of range (num_cell_symbols = {num_cell_symbols})"
            )));
        }
        Ok(())
    }
}

/// One piece of a state: either text tokens or a grid observation.
///
/// Observations are always environment-provided, so they carry no
/// `actor_generated` flag.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Segment {
    Text {
        tokens: Vec<u32>,
        actor_generated: bool,
    },
    Observation {
        obs: Observation,
    },
}

impl Segment {
    pub fn prompt(tokens: Vec<u32>) -> Self {
        Segment::Text {
            tokens,
            actor_generated: false,
        }
    }

    pub fn action(tokens: Vec<u32>) -> Self {
        Segment::Text {
            tokens,
            actor_generated: true,
        }
    }

    pub fn observation(obs: Observation) -> Self {
        Segment::Observation { obs }
    }

    pub fn is_actor_generated(&self) -> bool {
        matches!(
            self,
            Segment::Text {
                actor_generated: true,
                ..
            }
        )
    }
}

/// A state of the token MDP: an append-only sequence of segments.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct State {
    pub segments: Vec<Segment>,
}

impl State {
    pub fn new(segments: Vec<Segment>) -> Self {
        Self { segments }
    }

    /// Deterministic transition: the successor is this state followed by `more`.
    pub fn extended(&self, more: impl IntoIterator<Item = Segment>) -> State {
        let mut segments = self.segments.clone();
        segments.extend(more);
        State { segments }
    }

    pub fn is_prefix_of(&self, other: &State) -> bool {
        other.segments.len() >= self.segments.len()
            && other.segments[..self.segments.len()] == self.segments[..]
    }

    /// Actor-generated tokens across all turns, in order.
    pub fn actor_tokens(&self) -> Vec<u32> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                Segment::Text {
                    tokens,
                    actor_generated: true,
                } => Some(tokens.as_slice()),
                _ => None,
            })
            .flatten()
            .copied()
            .collect()
    }

    /// The most recent actor action, if any.
    pub fn last_action(&self) -> Option<&[u32]> {
        self.segments.iter().rev().find_map(|s| match s {
            Segment::Text {
                tokens,
                actor_generated: true,
            } => Some(tokens.as_slice()),
            _ => None,
        })
    }

    pub fn observations(&self) -> impl Iterator<Item = &Observation> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Observation { obs } => Some(obs),
            _ => None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// A configured stop token was emitted.
    Stop,
    /// `max_new_tokens` or the context limit was reached.
    Length,
}

/// One complete episode together with everything later stages need.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub initial_state: State,
    pub final_state: State,
    pub flat_tokens: Vec<u32>,
    pub response_mask: Vec<u8>,
    /// Behaviour-policy log-probabilities, 0 where `response_mask` is 0.
    pub sampled_logprobs: Vec<f64>,
    pub turn_count: usize,
    pub reward_components: BTreeMap<String, f64>,
    pub total_reward: f64,
    pub group_id: u64,
    pub prompt_id: u64,
    pub rng_seed: u64,
    /// Context ran out before the episode terminated on its own.
    pub truncated: bool,
    /// Greedy rollout kept aside as a baseline; never part of a group.
    pub greedy_baseline: bool,
}

impl Trajectory {
    pub fn response_len(&self) -> usize {
        self.response_mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn check_invariants(&self, max_turns: usize) -> Result<()> {
        if self.flat_tokens.len() != self.response_mask.len()
            || self.flat_tokens.len() != self.sampled_logprobs.len()
        {
            return Err(Error::Protocol("trajectory field lengths disagree".into()));
        }
        for (t, (&m, &lp)) in self
            .response_mask
            .iter()
            .zip(&self.sampled_logprobs)
            .enumerate()
        {
            if m == 1 && !(lp.is_finite() && lp <= 0.0) {
                return Err(Error::Numeric(format!(
                    "sampled logprob {lp} at position {t} is not a finite log-probability"
                )));
            }
        }
        if self.turn_count > max_turns {
            return Err(Error::Protocol(format!(
                "turn_count {} exceeds max_turns {max_turns}",
                self.turn_count
            )));
        }
        if !self.initial_state.is_prefix_of(&self.final_state) {
            return Err(Error::Protocol(
                "initial state is not a prefix of the final state".into(),
            ));
        }
        Ok(())
    }
}
