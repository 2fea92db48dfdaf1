use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use super::{batch_inputs, to_field};
use crate::algo::{total_objective, AlgoConfig, ObjectiveInput, ObjectiveStats, Registry};
use crate::engine::{GenerationRequest, InferenceEngine, StepStats, TrainEngine};
use crate::env::{reset, step, TaskInstance};
use crate::error::{Error, Result};
use crate::policy::{grad, logprob_of, PolicyParams, SamplingConfig, SequenceGrads, SequenceRef};
use crate::proto::{
    field, flatten_state, PlaceholderPolicy, State, StopReason, Trajectory, TrajectoryBatch,
};
use crate::rng::mix_seed;

/// One prompt slot of a rollout request.
#[derive(Clone, Copy)]
pub struct RolloutPrompt<'a> {
    pub instance: &'a TaskInstance,
    pub group_id: u64,
    /// Base seed; trajectory `k` of this prompt derives its own stream.
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LogprobSource {
    Live,
    Old,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActorStats {
    pub loss: f64,
    pub objective: ObjectiveStats,
    pub grad_norm: f64,
}

/// Owns the live policy (inside its train engine) and the frozen behaviour
/// policy that produced the current batch.
pub struct Actor {
    engine: Box<dyn TrainEngine<PolicyParams> + Send>,
    old: PolicyParams,
    pub sampling: SamplingConfig,
    pub placeholder: PlaceholderPolicy,
}

struct Episode {
    state: State,
    logprobs: Vec<f64>,
    turns: usize,
    done: bool,
    truncated: bool,
}

impl Actor {
    pub fn new(
        engine: Box<dyn TrainEngine<PolicyParams> + Send>,
        sampling: SamplingConfig,
        placeholder: PlaceholderPolicy,
    ) -> Result<Self> {
        sampling.validate()?;
        let old = engine.unwrap()?.snapshot();
        Ok(Self {
            engine,
            old,
            sampling,
            placeholder,
        })
    }

    pub fn live(&self) -> Result<&PolicyParams> {
        self.engine.unwrap()
    }

    pub fn old(&self) -> &PolicyParams {
        &self.old
    }

    pub fn engine(&self) -> &dyn TrainEngine<PolicyParams> {
        self.engine.as_ref()
    }

    pub fn engine_mut(&mut self) -> &mut (dyn TrainEngine<PolicyParams> + Send) {
        self.engine.as_mut()
    }

    /// `pi_old <- pi_theta`.
    pub fn refresh_old(&mut self) -> Result<()> {
        self.old = self.engine.unwrap()?.snapshot();
        Ok(())
    }

    /// Plays `k` sampled episodes per prompt (plus one greedy episode per
    /// prompt when `greedy` is set) with the behaviour policy synced to
    /// `engine`.
    pub fn generate_rollouts(
        &self,
        prompts: &[RolloutPrompt<'_>],
        k: usize,
        greedy: bool,
        engine: &dyn InferenceEngine,
    ) -> Result<Vec<Trajectory>> {
        run_episodes(
            prompts,
            k,
            greedy,
            &self.sampling,
            &self.placeholder,
            self.old.hyper.max_len,
            engine,
        )
    }

    /// Per-position log-probs of every row under the live or old policy.
    pub fn compute_logprobs(
        &self,
        batch: &TrajectoryBatch,
        which: LogprobSource,
    ) -> Result<Vec<f64>> {
        let params = match which {
            LogprobSource::Live => self.engine.unwrap()?,
            LogprobSource::Old => &self.old,
        };
        let rows = batch_inputs(batch, &self.placeholder)?
            .iter()
            .map(|f| logprob_of(params, &f.items, &f.response_mask))
            .collect::<Result<Vec<_>>>()?;
        Ok(to_field(&rows, batch.max_len()))
    }

    /// Writes `old_logprobs` into the batch.
    pub fn annotate_old_logprobs(&self, batch: &mut TrajectoryBatch) -> Result<()> {
        let lp = self.compute_logprobs(batch, LogprobSource::Old)?;
        batch.set_field(field::OLD_LOGPROBS, 0.0, lp)
    }

    /// One gradient step on the configured objective over `minibatch`.
    pub fn update(
        &mut self,
        minibatch: &TrajectoryBatch,
        algo: &AlgoConfig,
        registry: &Registry,
    ) -> Result<ActorStats> {
        let width = minibatch.max_len();
        let mask = minibatch.data(field::RESPONSE_MASK)?;
        let old = minibatch.data(field::OLD_LOGPROBS)?;
        let adv = minibatch.data(field::ADVANTAGES)?;
        let reference = if minibatch.has(field::REF_LOGPROBS) {
            Some(minibatch.data(field::REF_LOGPROBS)?)
        } else {
            None
        };
        let inputs = batch_inputs(minibatch, &self.placeholder)?;
        let seqs: Vec<SequenceRef<'_>> = inputs
            .iter()
            .map(|f| SequenceRef {
                items: &f.items,
                response_mask: &f.response_mask,
            })
            .collect();
        let stats_out = RefCell::new(ObjectiveStats::default());
        let (loss, grads) = grad(self.engine.unwrap()?, &seqs, |stats| {
            let new = to_field(
                &stats.iter().map(|s| s.logprobs.clone()).collect::<Vec<_>>(),
                width,
            );
            let ent = to_field(
                &stats
                    .iter()
                    .map(|s| s.entropies.clone())
                    .collect::<Vec<_>>(),
                width,
            );
            let out = total_objective(
                ObjectiveInput {
                    new_logprobs: &new,
                    old_logprobs: old,
                    ref_logprobs: reference,
                    entropies: &ent,
                    advantages: adv,
                    mask,
                    width,
                },
                algo,
                registry,
            )?;
            *stats_out.borrow_mut() = out.stats.clone();
            let grads = stats
                .iter()
                .enumerate()
                .map(|(r, s)| {
                    let n = s.logprobs.len();
                    SequenceGrads {
                        d_logprobs: out.d_new[r * width..r * width + n].to_vec(),
                        d_entropies: out.d_entropy[r * width..r * width + n].to_vec(),
                    }
                })
                .collect();
            Ok((out.loss, grads))
        })?;
        let StepStats {
            grad_norm_pre_clip, ..
        } = self.engine.step(&grads)?;
        Ok(ActorStats {
            loss,
            objective: stats_out.into_inner(),
            grad_norm: grad_norm_pre_clip,
        })
    }
}

/// Runs episodes for every prompt against the environment: `k` sampled under
/// `sampling`, then one temperature-0 episode when `greedy` is set.
pub fn run_episodes(
    prompts: &[RolloutPrompt<'_>],
    k: usize,
    greedy: bool,
    sampling: &SamplingConfig,
    placeholder: &PlaceholderPolicy,
    max_len: usize,
    engine: &dyn InferenceEngine,
) -> Result<Vec<Trajectory>> {
    if !engine.is_loaded() {
        return Err(Error::Lifecycle(
            "rollout requested from an offloaded inference engine".into(),
        ));
    }
    let per_prompt = k + usize::from(greedy);
    let mut slots = Vec::with_capacity(prompts.len() * per_prompt);
    for p in prompts {
        for j in 0..per_prompt {
            slots.push((p, j, mix_seed(p.seed, &[j as u64])));
        }
    }
    let mut episodes: Vec<Episode> = slots
        .iter()
        .map(|(p, _, seed)| Episode {
            state: reset(p.instance, *seed),
            logprobs: Vec::new(),
            turns: 0,
            done: false,
            truncated: false,
        })
        .collect();
    let greedy_cfg = sampling.greedy();
    for turn in 1.. {
        let mut active = Vec::new();
        let mut requests = [Vec::new(), Vec::new()];
        for (i, ep) in episodes.iter_mut().enumerate() {
            if ep.done {
                continue;
            }
            let flat = flatten_state(&ep.state, placeholder)?;
            if flat.items.len() >= max_len {
                ep.done = true;
                ep.truncated = true;
                continue;
            }
            let is_greedy = slots[i].1 == k;
            active.push((i, is_greedy));
            requests[usize::from(is_greedy)].push(GenerationRequest {
                prefix: flat.items,
                seed: mix_seed(slots[i].2, &[turn as u64]),
            });
        }
        if active.is_empty() {
            break;
        }
        let mut outputs = [
            engine.generate(&requests[0], sampling)?.into_iter(),
            engine.generate(&requests[1], &greedy_cfg)?.into_iter(),
        ];
        for (i, is_greedy) in active {
            let gen = outputs[usize::from(is_greedy)]
                .next()
                .expect("one output per request");
            let (p, _, _) = slots[i];
            let ep = &mut episodes[i];
            let (next, resp) = step(p.instance, &ep.state, &gen.tokens, turn);
            ep.state = next;
            ep.logprobs.extend(&gen.logprobs);
            ep.turns = turn;
            let ran_out = gen.stop_reason == StopReason::Length
                && flatten_state(&ep.state, placeholder)?.items.len() >= max_len;
            if resp.done || ran_out {
                ep.done = true;
                ep.truncated = ran_out && !resp.done;
            }
        }
    }
    slots
        .iter()
        .zip(episodes)
        .map(|((p, j, seed), ep)| {
            let flat = flatten_state(&ep.state, placeholder)?;
            let mut sampled = vec![0.0; flat.tokens.len()];
            let mut it = ep.logprobs.iter();
            for (t, &m) in flat.response_mask.iter().enumerate() {
                if m == 1 {
                    sampled[t] = *it.next().ok_or_else(|| {
                        Error::Protocol("fewer log-probs than response tokens".into())
                    })?;
                }
            }
            Ok(Trajectory {
                initial_state: reset(p.instance, *seed),
                final_state: ep.state,
                flat_tokens: flat.tokens,
                response_mask: flat.response_mask,
                sampled_logprobs: sampled,
                turn_count: ep.turns,
                reward_components: Default::default(),
                total_reward: 0.0,
                group_id: p.group_id,
                prompt_id: p.instance.id,
                rng_seed: *seed,
                truncated: ep.truncated,
                greedy_baseline: *j == k,
            })
        })
        .collect()
}
