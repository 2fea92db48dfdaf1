use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::eval::evaluate_policy;
use super::metrics::{MetricsLog, RunHeader, StepMetrics, StepTiming};
use crate::algo::{estimate_advantages, Registry};
use crate::config::RunConfig;
use crate::engine::{inference_engine, InProcessTrainer, InferenceEngine};
use crate::env::{generate_instances, read_instances, verify_state, EnvSpec, TaskInstance};
use crate::error::{Error, Result};
use crate::policy::{
    load_params, save_params, CriticParams, PolicyParams, SamplingConfig, FORMAT_VERSION,
};
use crate::proto::{field, make_batch, select_rows, DumpRecord, Trajectory, TrajectoryBatch};
use crate::reward::RewardConfig;
use crate::rng::{mix_seed, stream, tag};
use crate::roles::{
    Actor, ActorStats, Critic, CriticStats, Reference, RefreshPolicy, RewardRole, RolloutPrompt,
};

/// Loop position and the little state that must survive a checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Iteration and step of the last completed step (0 before the first).
    pub iteration: usize,
    pub step: usize,
    pub global_step: usize,
    /// Prompt-sampling position: epoch over the instance set and offset.
    pub prompt_epoch: u64,
    pub prompt_cursor: usize,
    pub best_eval: Option<f64>,
    /// Seconds spent in this process; not persisted.
    #[serde(skip)]
    pub wall_clock: f64,
}

/// What [`Trainer::run`] leaves behind.
#[derive(Clone, Debug, Default)]
pub struct RunSummary {
    pub history: Vec<StepMetrics>,
    pub final_checkpoint: Option<PathBuf>,
}

/// Training and evaluation instance sets for a config.
pub fn load_run_data(cfg: &RunConfig) -> Result<(Vec<TaskInstance>, Vec<TaskInstance>)> {
    let spec = cfg.data.env_spec();
    let load = |file: &Option<String>, n: usize, seed: u64| -> Result<Vec<TaskInstance>> {
        let set = match file {
            Some(path) => read_instances(Path::new(path))?,
            None => generate_instances(&spec, n, seed)?,
        };
        if let Some(bad) = set.iter().find(|i| i.env != spec) {
            return Err(Error::Config(format!(
                "instance {} was generated for {:?}, config describes {:?}",
                bad.id, bad.env, spec
            )));
        }
        Ok(set)
    };
    let train = load(
        &cfg.data.train_file,
        cfg.data.train_size,
        cfg.data.train_seed,
    )?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training instance set is empty".into()));
    }
    let eval = load(&cfg.data.eval_file, cfg.data.eval_size, cfg.data.eval_seed)?;
    Ok((train, eval))
}

/// Owns every role and drives the loop one step at a time.
pub struct Trainer {
    cfg: RunConfig,
    registry: Registry,
    spec: EnvSpec,
    reward_cfg: RewardConfig,
    train_set: Vec<TaskInstance>,
    eval_set: Vec<TaskInstance>,
    actor: Actor,
    critic: Option<Critic>,
    reference: Option<Reference>,
    reward: RewardRole,
    inference: Box<dyn InferenceEngine>,
    needs_greedy: bool,
    state: TrainState,
    order: Vec<usize>,
    out: Option<Output>,
}

struct Output {
    dir: PathBuf,
    log: MetricsLog,
    rollouts: Option<BufWriter<fs::File>>,
}

impl Trainer {
    /// Builds all roles from `cfg`; resumes when `trainer.resume_from` is set.
    pub fn new(cfg: RunConfig, registry: Registry) -> Result<Self> {
        let (train, eval) = load_run_data(&cfg)?;
        Self::with_data(cfg, registry, train, eval)
    }

    pub fn with_data(
        cfg: RunConfig,
        registry: Registry,
        train_set: Vec<TaskInstance>,
        eval_set: Vec<TaskInstance>,
    ) -> Result<Self> {
        cfg.validate(&registry)?;
        let spec = cfg.data.env_spec();
        let seed = cfg.trainer.seed;
        let placeholder = spec.vocab().placeholder_policy(spec.height, spec.width);
        let hyper = spec.hyper(cfg.actor.d_model, cfg.actor.d_visual);
        let policy = PolicyParams::init(hyper, seed)?;
        let sampling = SamplingConfig {
            temperature: cfg.rollout.temperature,
            top_k: cfg.rollout.top_k,
            max_new_tokens: spec.max_new_tokens,
            stop_tokens: spec.stop_tokens(),
            ngram_block: cfg.rollout.ngram_block,
        };
        let entry = registry.estimator(&cfg.algorithm.adv_estimator)?.clone();
        let reference = (cfg.algorithm.kl.beta_kl > 0.0 || cfg.actor.track_ref_kl)
            .then(|| Reference::new(&policy, cfg.trainer.ref_refresh, placeholder));
        let actor = Actor::new(
            Box::new(InProcessTrainer::prepared(
                policy,
                cfg.actor.optimizer.clone(),
            )?),
            sampling,
            placeholder,
        )?;
        let critic = if entry.needs_values {
            let params =
                CriticParams::init(spec.hyper(cfg.critic.d_model, cfg.critic.d_visual), seed)?;
            Some(Critic::new(
                Box::new(InProcessTrainer::prepared(
                    params,
                    cfg.critic.optimizer.clone(),
                )?),
                cfg.critic.value_clip,
                placeholder,
            ))
        } else {
            None
        };
        let reward_cfg = cfg.reward.to_reward_config()?;
        let mut trainer = Self {
            reward: RewardRole::new(reward_cfg.clone(), registry.clone())?,
            inference: inference_engine(&cfg.rollout.engine)?,
            needs_greedy: entry.needs_greedy,
            reward_cfg,
            spec,
            train_set,
            eval_set,
            actor,
            critic,
            reference,
            state: TrainState::default(),
            order: Vec::new(),
            out: None,
            registry,
            cfg,
        };
        if let Some(dir) = trainer.cfg.trainer.resume_from.clone() {
            trainer.restore(Path::new(&dir))?;
        }
        trainer.order = trainer.permutation(trainer.state.prompt_epoch);
        Ok(trainer)
    }

    /// Directs metrics, checkpoints and dumps into `dir`.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        let header = RunHeader {
            format_version: FORMAT_VERSION,
            config: serde_json::to_value(&self.cfg)?,
        };
        let keep = (self.state.global_step > 0).then_some(self.state.global_step);
        let log = MetricsLog::create(dir, header, keep)?;
        let cfg_path = dir.join("config.yaml");
        fs::write(&cfg_path, serde_yaml::to_string(&self.cfg)?)
            .map_err(|e| Error::io(&cfg_path, e))?;
        let rollouts = if self.cfg.trainer.dump_rollouts {
            let path = dir.join("rollouts.jsonl");
            let file = OpenOptions::new()
                .create(true)
                .append(keep.is_some())
                .write(true)
                .truncate(keep.is_none())
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            Some(BufWriter::new(file))
        } else {
            None
        };
        self.out = Some(Output {
            dir: dir.to_path_buf(),
            log,
            rollouts,
        });
        Ok(self)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn env_spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn actor(&self) -> &Actor {
        &self.actor
    }

    pub fn critic(&self) -> Option<&Critic> {
        self.critic.as_ref()
    }

    pub fn reference(&self) -> Option<&Reference> {
        self.reference.as_ref()
    }

    pub fn inference(&self) -> &dyn InferenceEngine {
        self.inference.as_ref()
    }

    pub fn eval_set(&self) -> &[TaskInstance] {
        &self.eval_set
    }

    pub fn is_finished(&self) -> bool {
        self.state.global_step >= self.cfg.trainer.total_steps()
    }

    fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.train_set.len()).collect();
        order.shuffle(&mut stream(self.cfg.trainer.seed, &[tag::PROMPTS, epoch]));
        order
    }

    fn next_prompts(&mut self) -> Vec<usize> {
        let mut picked = Vec::with_capacity(self.cfg.trainer.batch_size);
        while picked.len() < self.cfg.trainer.batch_size {
            if self.state.prompt_cursor == self.order.len() {
                self.state.prompt_epoch += 1;
                self.state.prompt_cursor = 0;
                self.order = self.permutation(self.state.prompt_epoch);
            }
            picked.push(self.order[self.state.prompt_cursor]);
            self.state.prompt_cursor += 1;
        }
        picked
    }

    /// Runs every remaining step and saves the final checkpoint.
    pub fn run(&mut self) -> Result<RunSummary> {
        let mut summary = RunSummary::default();
        while !self.is_finished() {
            summary.history.push(self.step()?);
        }
        if self.out.is_some() {
            summary.final_checkpoint = Some(self.save_checkpoint()?);
        }
        Ok(summary)
    }

    /// One pass of the four stages; returns that step's metrics.
    pub fn step(&mut self) -> Result<StepMetrics> {
        if self.is_finished() {
            return Err(Error::Config(
                "the configured number of steps has already run".into(),
            ));
        }
        let m = self.cfg.trainer.steps_per_iteration;
        let global_step = self.state.global_step + 1;
        let iteration = (global_step - 1) / m + 1;
        let step = (global_step - 1) % m + 1;
        let started = Instant::now();
        let stage = |name: &'static str| {
            move |e: Error| Error::Stage {
                stage: name,
                iteration,
                step,
                source: Box::new(e),
            }
        };

        if step == 1 && iteration > 1 && self.cfg.trainer.ref_refresh == RefreshPolicy::PerIteration
        {
            if let Some(r) = &mut self.reference {
                r.refresh(self.actor.live()?);
            }
        }

        // sampling
        let prompt_idx = self.next_prompts();
        let t0 = Instant::now();
        let trajectories = self
            .sample(global_step, &prompt_idx)
            .map_err(stage("sampling"))?;
        let sampling_s = t0.elapsed().as_secs_f64();

        // scoring
        let t0 = Instant::now();
        let (mut batch, row_instances, mut trajectories) = self
            .score(trajectories, &prompt_idx)
            .map_err(stage("scoring"))?;
        let scoring_s = t0.elapsed().as_secs_f64();

        // advantages
        let t0 = Instant::now();
        self.advantages(&mut batch).map_err(stage("advantage"))?;
        let advantage_s = t0.elapsed().as_secs_f64();

        // update
        let t0 = Instant::now();
        let (actor_stats, critic_stats) =
            self.update(global_step, &batch).map_err(stage("update"))?;
        let update_s = t0.elapsed().as_secs_f64();

        self.state.global_step = global_step;
        self.state.iteration = iteration;
        self.state.step = step;

        let mut metrics = summarize(&batch, &trajectories, &actor_stats, critic_stats.as_deref());
        let correct = batch
            .states
            .iter()
            .zip(&row_instances)
            .filter(|(s, &i)| verify_state(s, &self.train_set[i]).correct)
            .count();
        metrics.accuracy = correct as f64 / batch.rows() as f64;
        metrics.iteration = iteration;
        metrics.step = step;
        metrics.global_step = global_step;
        if let Some(every) = self.cfg.trainer.eval_every {
            if global_step % every == 0 || global_step == self.cfg.trainer.total_steps() {
                let report = evaluate_policy(
                    self.actor.live()?,
                    &self.spec,
                    &self.eval_set,
                    &self.reward_cfg,
                    &self.registry,
                )
                .map_err(stage("evaluation"))?;
                metrics.eval_accuracy = Some(report.accuracy);
                metrics.eval_mean_reward = Some(report.mean_reward);
                let best = self
                    .state
                    .best_eval
                    .map_or(report.accuracy, |b| b.max(report.accuracy));
                self.state.best_eval = Some(best);
            }
        }
        metrics.check_finite().map_err(stage("metrics"))?;
        self.state.wall_clock += started.elapsed().as_secs_f64();

        if self.cfg.trainer.log_every > 0 && global_step % self.cfg.trainer.log_every == 0 {
            log::info!(
                "step {global_step}: reward {:.3} accuracy {:.3} loss {:.4} entropy {:.3}{}",
                metrics.mean_reward,
                metrics.accuracy,
                metrics.policy_loss,
                metrics.entropy_mean,
                metrics
                    .eval_accuracy
                    .map(|a| format!(" eval {a:.3}"))
                    .unwrap_or_default()
            );
        }
        let timing = StepTiming {
            global_step,
            sampling_s,
            scoring_s,
            advantage_s,
            update_s,
            total_s: started.elapsed().as_secs_f64(),
        };
        let checkpoint_due = self.cfg.trainer.checkpoint_every.is_some_and(|every| {
            global_step % every == 0 && global_step < self.cfg.trainer.total_steps()
        });
        if let Some(out) = &mut self.out {
            out.log.record(&metrics, &timing)?;
            if let Some(w) = &mut out.rollouts {
                let vocab = Some(self.spec.vocab());
                trajectories.retain(|t| !t.greedy_baseline);
                let records: Vec<DumpRecord> = trajectories
                    .iter()
                    .map(|t| DumpRecord::from_trajectory(t, vocab))
                    .collect();
                DumpRecord::write_all(&records, &mut *w)?;
            }
        }
        if checkpoint_due && self.out.is_some() {
            self.save_checkpoint().map_err(stage("checkpoint"))?;
        }
        Ok(metrics)
    }

    fn sample(&mut self, global_step: usize, prompt_idx: &[usize]) -> Result<Vec<Trajectory>> {
        self.actor.refresh_old()?;
        self.inference.sync_weights(self.actor.old())?;
        self.inference.load()?;
        let b = self.cfg.trainer.batch_size as u64;
        let prompts: Vec<RolloutPrompt<'_>> = prompt_idx
            .iter()
            .enumerate()
            .map(|(slot, &i)| RolloutPrompt {
                instance: &self.train_set[i],
                group_id: (global_step as u64 - 1) * b + slot as u64,
                seed: mix_seed(
                    self.cfg.trainer.seed,
                    &[tag::ROLLOUT, global_step as u64, slot as u64],
                ),
            })
            .collect();
        let out = self.actor.generate_rollouts(
            &prompts,
            self.cfg.algorithm.group_size,
            self.needs_greedy,
            self.inference.as_ref(),
        );
        // release the rollout snapshot before training, as in co-located runs
        self.inference.offload()?;
        out
    }

    fn score(
        &self,
        mut trajectories: Vec<Trajectory>,
        prompt_idx: &[usize],
    ) -> Result<(TrajectoryBatch, Vec<usize>, Vec<Trajectory>)> {
        let per_prompt = self.cfg.algorithm.group_size + usize::from(self.needs_greedy);
        let instance_of: Vec<usize> = prompt_idx
            .iter()
            .flat_map(|&i| std::iter::repeat(i).take(per_prompt))
            .collect();
        let instances: Vec<&TaskInstance> =
            instance_of.iter().map(|&i| &self.train_set[i]).collect();
        self.reward.score_all(&mut trajectories, &instances)?;
        let greedy: BTreeMap<u64, f64> = trajectories
            .iter()
            .filter(|t| t.greedy_baseline)
            .map(|t| (t.group_id, t.total_reward))
            .collect();
        let (rows, row_instances): (Vec<Trajectory>, Vec<usize>) = trajectories
            .iter()
            .zip(&instance_of)
            .filter(|(t, _)| !t.greedy_baseline)
            .map(|(t, &i)| (t.clone(), i))
            .unzip();
        let mut batch = make_batch(&rows, self.spec.vocab().pad())?;
        let refs: Vec<&TaskInstance> = row_instances.iter().map(|&i| &self.train_set[i]).collect();
        self.reward.score_batch(&mut batch, &refs)?;
        if self.needs_greedy {
            let values = batch
                .group_ids
                .iter()
                .map(|g| {
                    greedy
                        .get(g)
                        .copied()
                        .ok_or_else(|| Error::Protocol(format!("group {g} has no greedy rollout")))
                })
                .collect::<Result<Vec<_>>>()?;
            batch.set_row_values(field::GREEDY_REWARD, values)?;
        }
        Ok((batch, row_instances, trajectories))
    }

    fn advantages(&self, batch: &mut TrajectoryBatch) -> Result<()> {
        self.actor.annotate_old_logprobs(batch)?;
        if let Some(r) = &self.reference {
            r.compute_logprobs(batch)?;
        }
        if let Some(c) = &self.critic {
            c.compute_values(batch)?;
        }
        estimate_advantages(batch, &self.cfg.algorithm, &self.registry)
    }

    fn update(
        &mut self,
        global_step: usize,
        batch: &TrajectoryBatch,
    ) -> Result<(ActorStats, Option<Vec<CriticStats>>)> {
        let rows = batch.rows();
        let mb = self.cfg.trainer.minibatch_size.unwrap_or(rows).min(rows);
        let mut actor_runs: Vec<ActorStats> = Vec::new();
        let mut critic_runs = Vec::new();
        for epoch in 0..self.cfg.trainer.update_epochs {
            let mut order: Vec<usize> = (0..rows).collect();
            order.shuffle(&mut stream(
                self.cfg.trainer.seed,
                &[tag::SHUFFLE, global_step as u64, epoch as u64],
            ));
            for chunk in order.chunks(mb) {
                let mut idx = chunk.to_vec();
                idx.sort_unstable();
                let minibatch = select_rows(batch, &idx)?;
                actor_runs.push(self.actor.update(
                    &minibatch,
                    &self.cfg.algorithm,
                    &self.registry,
                )?);
                if let Some(c) = &mut self.critic {
                    critic_runs.push(c.update(&minibatch)?);
                }
            }
        }
        let n = actor_runs.len() as f64;
        let mut mean = ActorStats::default();
        for s in &actor_runs {
            mean.loss += s.loss / n;
            mean.grad_norm += s.grad_norm / n;
            mean.objective.policy_loss += s.objective.policy_loss / n;
            mean.objective.entropy_mean += s.objective.entropy_mean / n;
            mean.objective.clip_fraction += s.objective.clip_fraction / n;
            mean.objective.mean_ratio += s.objective.mean_ratio / n;
            mean.objective.kl_mean = match (mean.objective.kl_mean, s.objective.kl_mean) {
                (acc, Some(k)) => Some(acc.unwrap_or(0.0) + k / n),
                (acc, None) => acc,
            };
        }
        Ok((mean, self.critic.is_some().then_some(critic_runs)))
    }

    /// Writes `ckpt/step_{n}` under the output directory.
    pub fn save_checkpoint(&self) -> Result<PathBuf> {
        let out = self
            .out
            .as_ref()
            .ok_or_else(|| Error::Config("trainer has no output directory".into()))?;
        let dir = out
            .dir
            .join("ckpt")
            .join(format!("step_{}", self.state.global_step));
        self.save_to(&dir)?;
        Ok(dir)
    }

    /// Writes the full resumable state into `dir`.
    pub fn save_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.actor.engine().save_checkpoint(&dir.join("policy"))?;
        if let Some(c) = &self.critic {
            c.engine().save_checkpoint(&dir.join("critic"))?;
        }
        if let Some(r) = &self.reference {
            save_params(&dir.join("reference"), r.params(), serde_json::Value::Null)?;
        }
        let path = dir.join("train_state.json");
        fs::write(&path, serde_json::to_vec_pretty(&self.state)?).map_err(|e| Error::io(&path, e))
    }

    fn restore(&mut self, dir: &Path) -> Result<()> {
        let path = dir.join("train_state.json");
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let state: TrainState = serde_json::from_slice(&text)?;
        self.actor.engine_mut().restore(&dir.join("policy"))?;
        self.actor.refresh_old()?;
        if let Some(c) = &mut self.critic {
            c.engine_mut().restore(&dir.join("critic"))?;
        }
        if let Some(r) = &mut self.reference {
            let (params, _) = load_params::<PolicyParams>(&dir.join("reference"))?;
            r.refresh(&params);
        }
        self.state = state;
        Ok(())
    }
}

fn summarize(
    batch: &TrajectoryBatch,
    trajectories: &[Trajectory],
    actor: &ActorStats,
    critic: Option<&[CriticStats]>,
) -> StepMetrics {
    let rows: Vec<&Trajectory> = trajectories.iter().filter(|t| !t.greedy_baseline).collect();
    let n = rows.len().max(1) as f64;
    let totals = batch.row_values(field::TOTAL_REWARD).unwrap_or(&[]);
    StepMetrics {
        mean_reward: totals.iter().sum::<f64>() / n,
        reward_components: RewardRole::component_means(batch),
        accuracy: 0.0,
        policy_loss: actor.objective.policy_loss,
        value_loss: critic
            .map(|c| c.iter().map(|s| s.value_loss).sum::<f64>() / c.len().max(1) as f64),
        kl_mean: actor.objective.kl_mean,
        entropy_mean: actor.objective.entropy_mean,
        clip_fraction: actor.objective.clip_fraction,
        mean_ratio: actor.objective.mean_ratio,
        grad_norm: actor.grad_norm,
        mean_response_len: rows.iter().map(|t| t.response_len() as f64).sum::<f64>() / n,
        mean_turns: rows.iter().map(|t| t.turn_count as f64).sum::<f64>() / n,
        truncated_fraction: rows.iter().filter(|t| t.truncated).count() as f64 / n,
        ..StepMetrics::default()
    }
}

/// Trains `cfg` to completion, writing everything into `out`.
pub fn train(cfg: RunConfig, registry: Registry, out: &Path) -> Result<RunSummary> {
    Trainer::new(cfg, registry)?.with_output(out)?.run()
}
