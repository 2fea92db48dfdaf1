use serde::{Deserialize, Serialize};

use super::{batch_inputs, to_field};
use crate::error::Result;
use crate::policy::{logprob_of, PolicyParams};
use crate::proto::{field, PlaceholderPolicy, TrajectoryBatch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefreshPolicy {
    Never,
    PerIteration,
}

/// Frozen anchor policy for the KL term.
pub struct Reference {
    params: PolicyParams,
    pub refresh_policy: RefreshPolicy,
    pub placeholder: PlaceholderPolicy,
}

impl Reference {
    pub fn new(
        initial: &PolicyParams,
        refresh_policy: RefreshPolicy,
        placeholder: PlaceholderPolicy,
    ) -> Self {
        Self {
            params: initial.snapshot(),
            refresh_policy,
            placeholder,
        }
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn refresh(&mut self, live: &PolicyParams) {
        self.params = live.snapshot();
    }

    pub fn compute_logprobs(&self, batch: &mut TrajectoryBatch) -> Result<()> {
        let rows = batch_inputs(batch, &self.placeholder)?
            .iter()
            .map(|f| logprob_of(&self.params, &f.items, &f.response_mask))
            .collect::<Result<Vec<_>>>()?;
        batch.set_field(field::REF_LOGPROBS, 0.0, to_field(&rows, batch.max_len()))
    }
}
