use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::policy::{sample, Generation, ParamSet, PolicyParams, SamplingConfig};
use crate::proto::InputItem;

/// One prefix to continue, with the seed of its private random stream.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationRequest {
    pub prefix: Vec<InputItem>,
    pub seed: u64,
}

/// Rollout backend. Weights arrive through `sync_weights`; `load` makes them
/// resident and `offload` releases the resident copy.
pub trait InferenceEngine: Send {
    fn name(&self) -> &'static str;
    fn sync_weights(&mut self, params: &PolicyParams) -> Result<()>;
    fn load(&mut self) -> Result<()>;
    fn offload(&mut self) -> Result<()>;
    fn is_loaded(&self) -> bool;
    /// Bytes held by the resident weight snapshot (0 when offloaded).
    fn resident_bytes(&self) -> usize;
    fn generate(
        &self,
        requests: &[GenerationRequest],
        cfg: &SamplingConfig,
    ) -> Result<Vec<Generation>>;
}

/// Shared load/offload bookkeeping: `staged` is the host-side copy that
/// survives offload, `resident` the working snapshot.
pub(crate) struct Lifecycle<W> {
    pub staged: Option<PolicyParams>,
    pub resident: Option<W>,
}

impl<W> Default for Lifecycle<W> {
    fn default() -> Self {
        Self {
            staged: None,
            resident: None,
        }
    }
}

impl<W> Lifecycle<W> {
    pub fn sync(&mut self, params: &PolicyParams, convert: impl Fn(&PolicyParams) -> W) {
        self.staged = Some(params.clone());
        if self.resident.is_some() {
            self.resident = Some(convert(params));
        }
    }

    pub fn load(&mut self, convert: impl Fn(&PolicyParams) -> W) -> Result<()> {
        let staged = self
            .staged
            .as_ref()
            .ok_or_else(|| Error::Lifecycle("load before any sync_weights".into()))?;
        self.resident = Some(convert(staged));
        Ok(())
    }

    pub fn offload(&mut self) {
        self.resident = None;
    }

    pub fn resident(&self) -> Result<&W> {
        self.resident
            .as_ref()
            .ok_or_else(|| Error::Lifecycle("generate called while the engine is offloaded".into()))
    }
}

/// Runs generation through the policy module's own sampler.
#[derive(Default)]
pub struct InProcessEngine {
    life: Lifecycle<PolicyParams>,
}

impl InProcessEngine {
    pub fn new() -> Self {
        Self::default()
    }
}

impl InferenceEngine for InProcessEngine {
    fn name(&self) -> &'static str {
        "inprocess"
    }

    fn sync_weights(&mut self, params: &PolicyParams) -> Result<()> {
        self.life.sync(params, Clone::clone);
        Ok(())
    }

    fn load(&mut self) -> Result<()> {
        self.life.load(Clone::clone)
    }

    fn offload(&mut self) -> Result<()> {
        self.life.offload();
        Ok(())
    }

    fn is_loaded(&self) -> bool {
        self.life.resident.is_some()
    }

    fn resident_bytes(&self) -> usize {
        self.life.resident.as_ref().map_or(0, ParamSet::size_bytes)
    }

    fn generate(
        &self,
        requests: &[GenerationRequest],
        cfg: &SamplingConfig,
    ) -> Result<Vec<Generation>> {
        let params = self.life.resident()?;
        requests
            .iter()
            .map(|r| {
                sample(
                    params,
                    &r.prefix,
                    cfg,
                    &mut ChaCha8Rng::seed_from_u64(r.seed),
                )
            })
            .collect()
    }
}
