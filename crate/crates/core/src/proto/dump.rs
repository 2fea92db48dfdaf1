use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{Observation, Trajectory, Vocab};
use crate::error::Result;

/// One line of a trajectory dump (JSON Lines).
///
/// `observations` and `vocab` are optional extras so that dumps can be
/// rendered without the original instance file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpRecord {
    pub prompt_id: u64,
    pub group_id: u64,
    pub rng_seed: u64,
    pub flat_tokens: Vec<u32>,
    pub response_mask: Vec<u8>,
    pub total_reward: f64,
    pub reward_components: BTreeMap<String, f64>,
    pub turn_count: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub observations: Vec<Observation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vocab>,
}

impl DumpRecord {
    pub fn from_trajectory(t: &Trajectory, vocab: Option<Vocab>) -> Self {
        Self {
            prompt_id: t.prompt_id,
            group_id: t.group_id,
            rng_seed: t.rng_seed,
            flat_tokens: t.flat_tokens.clone(),
            response_mask: t.response_mask.clone(),
            total_reward: t.total_reward,
            reward_components: t.reward_components.clone(),
            turn_count: t.turn_count,
            observations: t.final_state.observations().cloned().collect(),
            vocab,
        }
    }

    pub fn write_all<W: Write>(records: &[DumpRecord], mut out: W) -> Result<()> {
        for r in records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")
                .map_err(|e| crate::error::Error::io("<dump>", e))?;
        }
        Ok(())
    }

    pub fn read_all<R: BufRead>(input: R) -> Result<Vec<DumpRecord>> {
        let mut out = Vec::new();
        for line in input.lines() {
            let line = line.map_err(|e| crate::error::Error::io("<dump>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line)?);
        }
        Ok(out)
    }
}
