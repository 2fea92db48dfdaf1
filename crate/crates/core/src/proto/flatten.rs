use serde::{Deserialize, Serialize};

use super::{Segment, State};
use crate::error::{Error, Result};

/// How observations are laid out on the flat position axis.
///
/// Each observation becomes `obs_start`, one `placeholder` per cell in
/// row-major order, then `obs_end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaceholderPolicy {
    pub obs_start: u32,
    pub obs_end: u32,
    pub placeholder: u32,
    pub max_height: usize,
    pub max_width: usize,
}

/// What the policy sees at one flat position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputItem {
    /// Text or control token, embedded through the token table.
    Token(u32),
    /// Observation cell, embedded through the grid encoder and connector.
    Cell { symbol: u32, row: u16, col: u16 },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlatState {
    pub tokens: Vec<u32>,
    pub response_mask: Vec<u8>,
    /// Index of the segment each position came from.
    pub segment_index: Vec<usize>,
    pub items: Vec<InputItem>,
}

impl FlatState {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn flatten_state(state: &State, policy: &PlaceholderPolicy) -> Result<FlatState> {
    let mut flat = FlatState {
        tokens: Vec::new(),
        response_mask: Vec::new(),
        segment_index: Vec::new(),
        items: Vec::new(),
    };
    for (seg_idx, segment) in state.segments.iter().enumerate() {
        match segment {
            Segment::Text {
                tokens,
                actor_generated,
            } => {
                let m = u8::from(*actor_generated);
                for &tok in tokens {
                    flat.tokens.push(tok);
                    flat.response_mask.push(m);
                    flat.segment_index.push(seg_idx);
                    flat.items.push(InputItem::Token(tok));
                }
            }
            Segment::Observation { obs } => {
                if obs.height > policy.max_height || obs.width > policy.max_width {
                    return Err(Error::Dimension(format!(
                        "observation {}x{} exceeds maximum {}x{}",
                        obs.height, obs.width, policy.max_height, policy.max_width
                    )));
                }
                if obs.cells.len() != obs.height * obs.width {
                    return Err(Error::Dimension(format!(
                        "observation {}x{} carries {} cells",
                        obs.height,
                        obs.width,
                        obs.cells.len()
                    )));
                }
                let mut push = |tok: u32, item: InputItem| {
                    flat.tokens.push(tok);
                    flat.response_mask.push(0);
                    flat.segment_index.push(seg_idx);
                    flat.items.push(item);
                };
                push(policy.obs_start, InputItem::Token(policy.obs_start));
                for (i, &symbol) in obs.cells.iter().enumerate() {
                    let item = InputItem::Cell {
                        symbol,
                        row: (i / obs.width) as u16,
                        col: (i % obs.width) as u16,
                    };
                    push(policy.placeholder, item);
                }
                push(policy.obs_end, InputItem::Token(policy.obs_end));
            }
        }
    }
    Ok(flat)
}
