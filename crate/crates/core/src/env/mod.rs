//! Synthetic grid environments: single-turn counting and grounding, and a
//! multi-turn search task where the grid starts hidden and must be probed.

mod generate;
mod tasks;

pub use generate::generate_instances;
pub use tasks::{
    answer_tokens, parse_action, reset, step, verify, verify_state, Action, Answer, EnvResponse,
    Verdict,
};

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::Hyper;
use crate::proto::{Observation, Vocab};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    GridCount,
    GridGround,
    MultiTurnSearch,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::GridCount => "grid_count",
            EnvKind::GridGround => "grid_ground",
            EnvKind::MultiTurnSearch => "multi_turn_search",
        }
    }

    pub fn is_multi_turn(self) -> bool {
        self == EnvKind::MultiTurnSearch
    }
}

impl std::str::FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid_count" => Ok(EnvKind::GridCount),
            "grid_ground" => Ok(EnvKind::GridGround),
            "multi_turn_search" => Ok(EnvKind::MultiTurnSearch),
            other => Err(Error::Config(format!(
                "unknown env `{other}` (expected grid_count, grid_ground or multi_turn_search)"
            ))),
        }
    }
}

/// Shape of one environment family. Everything the model needs to know about
/// the task (vocabulary, cell alphabet, context length) derives from it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub height: usize,
    pub width: usize,
    pub num_symbols: usize,
    pub max_turns: usize,
    /// Token budget per action.
    pub max_new_tokens: usize,
}

impl EnvSpec {
    pub fn default_for(kind: EnvKind) -> Self {
        match kind {
            EnvKind::GridCount | EnvKind::GridGround => Self {
                kind,
                height: 3,
                width: 3,
                num_symbols: 6,
                max_turns: 1,
                max_new_tokens: 4,
            },
            EnvKind::MultiTurnSearch => Self {
                kind,
                height: 4,
                width: 4,
                num_symbols: 4,
                max_turns: 4,
                max_new_tokens: 3,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Generation(m));
        if self.height == 0 || self.width == 0 {
            return bad("grid dimensions must be positive".into());
        }
        if self.max_turns == 0 || self.max_new_tokens == 0 {
            return bad("max_turns and max_new_tokens must be positive".into());
        }
        match self.kind {
            EnvKind::GridCount | EnvKind::GridGround if self.num_symbols < 2 => {
                bad(format!("{} needs at least 2 symbols", self.kind.name()))
            }
            EnvKind::GridGround if self.height * self.width < 2 => {
                bad("grounding needs at least 2 cells".into())
            }
            EnvKind::MultiTurnSearch if self.num_symbols < 1 => {
                bad("search needs at least 1 symbol".into())
            }
            EnvKind::MultiTurnSearch if self.max_new_tokens < 3 => {
                bad("search actions need at least 3 tokens".into())
            }
            EnvKind::GridCount | EnvKind::GridGround if self.max_turns != 1 => bad(format!(
                "{} is single-turn; max_turns must be 1",
                self.kind.name()
            )),
            _ => Ok(()),
        }
    }

    /// Digits double as counts, coordinates and symbol names.
    pub fn vocab(&self) -> Vocab {
        let (h, w, s) = (self.height, self.width, self.num_symbols);
        let digits = match self.kind {
            EnvKind::GridCount => (h * w + 1).max(s),
            EnvKind::GridGround | EnvKind::MultiTurnSearch => h.max(w).max(s),
        };
        Vocab::new(digits as u32, self.kind.is_multi_turn())
    }

    /// Symbol used for cells the agent has not looked at yet.
    pub fn hidden_symbol(&self) -> Option<u32> {
        self.kind.is_multi_turn().then_some(self.num_symbols as u32)
    }

    pub fn num_cell_symbols(&self) -> usize {
        self.num_symbols + usize::from(self.kind.is_multi_turn())
    }

    fn prompt_len(&self) -> usize {
        if self.kind.is_multi_turn() {
            3
        } else {
            2
        }
    }

    fn observation_len(&self) -> usize {
        self.height * self.width + 2
    }

    /// Longest flat sequence an episode can produce.
    pub fn max_len(&self) -> usize {
        let per_turn = self.max_new_tokens
            + if self.kind.is_multi_turn() {
                self.observation_len()
            } else {
                0
            };
        self.prompt_len() + self.observation_len() + self.max_turns * per_turn
    }

    pub fn hyper(&self, d_model: usize, d_visual: usize) -> Hyper {
        let v = self.vocab();
        Hyper {
            d_model,
            d_visual,
            vocab_size: v.vocab_size() as usize,
            action_vocab: v.text_region_end() as usize,
            num_cell_symbols: self.num_cell_symbols(),
            max_len: self.max_len(),
            grid_height: self.height,
            grid_width: self.width,
        }
    }

    pub fn stop_tokens(&self) -> Vec<u32> {
        vec![self.vocab().answer_close()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundTruth {
    Count(u32),
    Location { row: usize, col: usize },
    Symbol(u32),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: u64,
    pub env: EnvSpec,
    pub grid: Observation,
    pub target_symbol: u32,
    pub prompt_tokens: Vec<u32>,
    pub ground_truth: GroundTruth,
    /// Cell whose symbol the search task asks for.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query: Option<(usize, usize)>,
}

impl TaskInstance {
    pub fn max_turns(&self) -> usize {
        self.env.max_turns
    }

    /// Ground truth recomputed from the grid alone.
    pub fn recompute_truth(&self) -> Option<GroundTruth> {
        let g = &self.grid;
        match self.env.kind {
            EnvKind::GridCount => Some(GroundTruth::Count(
                g.cells.iter().filter(|&&c| c == self.target_symbol).count() as u32,
            )),
            EnvKind::GridGround => {
                let hits: Vec<usize> = (0..g.cells.len())
                    .filter(|&i| g.cells[i] == self.target_symbol)
                    .collect();
                (hits.len() == 1).then(|| GroundTruth::Location {
                    row: hits[0] / g.width,
                    col: hits[0] % g.width,
                })
            }
            EnvKind::MultiTurnSearch => self.query.map(|(r, c)| GroundTruth::Symbol(g.get(r, c))),
        }
    }
}

pub fn write_instances(path: &Path, instances: &[TaskInstance]) -> Result<()> {
    let mut out = Vec::new();
    for inst in instances {
        serde_json::to_writer(&mut out, inst)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_instances(path: &Path) -> Result<Vec<TaskInstance>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
