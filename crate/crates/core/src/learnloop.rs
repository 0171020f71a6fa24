//! Collaborative learning loop: collect expert steps during shared control,
//! flush them into the training set, re-tune, repeat.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arbiter::{run_episode, Actor, Agent, ArbiterConfig, ArbiterError, EpisodeRecord, Schedule};
use crate::env::{Env, TaskId};
use crate::eval::{policy_success, run_settings, BenchmarkSuite, EvalError};
use crate::expert::{Expert, ExpertKind};
use crate::obs::{compute_stats, NormStats, ObsError, ObsMode};
use crate::policy::{Architecture, PolicyParams};
use crate::train::{fit, fit_mixture, Dataset, FitReport, Sample, TrainConfig, TrainError};

pub const DEFAULT_BUFFER_CAPACITY: usize = 2000;
pub const DEMO_SEED_BASE: u64 = 1_000_000;
pub const COLLAB_SEED_BASE: u64 = 2_000_000;
/// Seed stride between rounds so rounds never reuse episodes.
const ROUND_SEED_STRIDE: u64 = 100_000;

#[derive(Debug, Error)]
pub enum LoopError {
    #[error(transparent)]
    Arbiter(#[from] ArbiterError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Obs(#[from] ObsError),
    #[error("buffer holds {filled}/{capacity} samples after {episodes} episodes; expert is not producing data")]
    Starved { filled: usize, capacity: usize, episodes: usize },
    #[error("invalid loop config: {0}")]
    Config(String),
}

/// Expert-step buffer with a hard capacity.
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    capacity: usize,
    samples: Vec<Sample>,
}

impl Buffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, samples: Vec::with_capacity(capacity) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.samples.len() >= self.capacity
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    /// Adds a sample unless full; policy samples are refused.
    pub fn push(&mut self, s: Sample) -> bool {
        if self.is_full() || s.actor != Actor::Expert {
            return false;
        }
        self.samples.push(s);
        true
    }

    /// Moves every sample into `dataset`, leaving the buffer empty.
    pub fn flush_into(&mut self, dataset: &mut Dataset) -> usize {
        let n = self.samples.len();
        dataset.extend(self.samples.drain(..));
        n
    }
}

/// Samples taken by `actor` (or every step when `None`) from a record.
pub fn samples_from_record(record: &EpisodeRecord, episode_id: u64, actor: Option<Actor>) -> Vec<Sample> {
    record
        .steps
        .iter()
        .filter(|s| actor.is_none_or(|a| a == s.actor))
        .map(|s| Sample { task: record.task, obs: s.obs.clone(), action: s.action, actor: s.actor, episode_id, step: s.step })
        .collect()
}

/// Scripted-expert demonstrations: `per_task` episodes per task, seeds
/// `seed_base..seed_base + per_task`.
pub fn collect_demos(
    env: &Env,
    expert: &dyn Expert,
    tasks: &[TaskId],
    per_task: usize,
    seed_base: u64,
    obs_mode: ObsMode,
    history: usize,
) -> Result<(Dataset, Vec<EpisodeRecord>), LoopError> {
    let cfg = ArbiterConfig { obs_mode, history, ..ArbiterConfig::new(Schedule::ExpertOnly) };
    let suite = BenchmarkSuite { tasks: tasks.to_vec(), seeds: (0..per_task as u64).map(|i| seed_base + i).collect() };
    let records = run_settings(env, None, expert, &suite, &[Schedule::ExpertOnly], &cfg)?;
    let mut data = Dataset::new(obs_mode, history);
    for (i, r) in records.iter().enumerate() {
        data.extend(samples_from_record(r, i as u64, Some(Actor::Expert)));
    }
    Ok((data, records))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectConfig {
    pub arbiter: ArbiterConfig,
    pub capacity: usize,
    pub tasks: Vec<TaskId>,
    pub seed_base: u64,
    /// Abort when this many episodes leave the buffer unfilled.
    pub episode_cap: usize,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            arbiter: ArbiterConfig::new(Schedule::Interleave(4)),
            capacity: DEFAULT_BUFFER_CAPACITY,
            tasks: TaskId::ALL.to_vec(),
            seed_base: COLLAB_SEED_BASE,
            episode_cap: 20_000,
        }
    }
}

impl CollectConfig {
    /// `(task, seed)` of the `j`-th collection episode in `round`.
    pub fn episode(&self, round: u32, j: usize) -> (TaskId, u64) {
        let task = self.tasks[j % self.tasks.len()];
        (task, self.seed_base + round as u64 * ROUND_SEED_STRIDE + j as u64)
    }
}

/// Runs collaboration episodes, cycling through tasks, until the buffer is
/// full. Only expert steps are buffered; every consumed episode is
/// returned. The set of consumed episodes does not depend on parallelism.
pub fn collect_round(
    env: &Env,
    agent: &Agent,
    expert: &dyn Expert,
    cfg: &CollectConfig,
    round: u32,
) -> Result<(Buffer, Vec<EpisodeRecord>), LoopError> {
    let mut buffer = Buffer::new(cfg.capacity);
    let mut records = Vec::new();
    if cfg.capacity == 0 {
        return Ok((buffer, records));
    }
    if cfg.tasks.is_empty() {
        return Err(LoopError::Config("task list is empty".into()));
    }
    if !cfg.arbiter.schedule.needs_expert() {
        return Err(LoopError::Config("collection needs a schedule with expert steps".into()));
    }
    let chunk = if expert.kind() == ExpertKind::HumanRemote { 1 } else { rayon::current_num_threads().max(1) * 2 };
    let mut next = 0usize;
    while !buffer.is_full() {
        if next >= cfg.episode_cap {
            return Err(LoopError::Starved { filled: buffer.len(), capacity: cfg.capacity, episodes: next });
        }
        let end = (next + chunk).min(cfg.episode_cap);
        let run = |j: usize| {
            let (task, seed) = cfg.episode(round, j);
            run_episode(env, Some(agent), expert, task, seed, &cfg.arbiter)
        };
        let batch: Vec<Result<EpisodeRecord, ArbiterError>> = if chunk == 1 {
            (next..end).map(run).collect()
        } else {
            (next..end).into_par_iter().map(run).collect()
        };
        for (j, rec) in (next..end).zip(batch) {
            if buffer.is_full() {
                break;
            }
            let rec = rec?;
            for s in samples_from_record(&rec, seed_episode_id(cfg, round, j), Some(Actor::Expert)) {
                if !buffer.push(s) {
                    break;
                }
            }
            records.push(rec);
        }
        next = end;
    }
    Ok((buffer, records))
}

fn seed_episode_id(cfg: &CollectConfig, round: u32, j: usize) -> u64 {
    cfg.episode(round, j).1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollabLearnConfig {
    pub rounds: u32,
    pub collect: CollectConfig,
    pub train: TrainConfig,
    pub eval: BenchmarkSuite,
    /// Share of each minibatch drawn from the bootstrap demonstrations.
    pub bootstrap_share: f64,
}

impl CollabLearnConfig {
    pub fn validate(&self) -> Result<(), LoopError> {
        if self.rounds == 0 {
            return Err(LoopError::Config("rounds must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.bootstrap_share) {
            return Err(LoopError::Config("bootstrap_share must lie in [0, 1]".into()));
        }
        self.train.validate()?;
        self.collect.arbiter.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u32,
    /// Policy-only success on the evaluation suite before re-tuning.
    pub pre_success: f64,
    pub post_success: f64,
    pub episodes: usize,
    pub buffer_samples: usize,
    pub dataset_samples: usize,
    /// Collaboration success while collecting.
    pub collab_success: f64,
    pub mean_steps: f64,
    pub mean_expert_steps: f64,
    pub initial_probe_loss: f64,
    pub final_probe_loss: f64,
}

pub struct LoopOutcome {
    pub agent: Agent,
    pub metrics: Vec<RoundMetrics>,
    /// Collaboration data accumulated over all rounds.
    pub dataset: Dataset,
    pub records: Vec<EpisodeRecord>,
}

/// `rounds` iterations of collect, flush, re-tune and evaluate, starting
/// from `initial`. Re-tuning continues from the current policy and mixes
/// bootstrap and collaboration data per minibatch.
pub fn run(
    env: &Env,
    initial: &Agent,
    bootstrap: &Dataset,
    expert: &dyn Expert,
    cfg: &CollabLearnConfig,
) -> Result<LoopOutcome, LoopError> {
    cfg.validate()?;
    let eval_cfg = ArbiterConfig { schedule: Schedule::PolicyOnly, ..cfg.collect.arbiter };
    let mut agent = initial.clone();
    let mut dataset = Dataset::new(bootstrap.obs_mode, bootstrap.history);
    let mut metrics = Vec::new();
    let mut all_records = Vec::new();
    let mut pre = policy_success(env, &agent, &cfg.eval, &eval_cfg)?;
    for round in 0..cfg.rounds {
        let (mut buffer, records) = collect_round(env, &agent, expert, &cfg.collect, round)?;
        let buffer_samples = buffer.flush_into(&mut dataset);
        debug_assert!(buffer.is_empty());
        let train = TrainConfig { seed: cfg.train.seed.wrapping_add(round as u64), ..cfg.train.clone() };
        let sources = [(bootstrap, cfg.bootstrap_share), (&dataset, 1.0 - cfg.bootstrap_share)];
        let fit = fit_mixture(&agent.params, &sources, &agent.stats, &train)?;
        agent = Agent { params: fit.params, stats: agent.stats };
        let post = policy_success(env, &agent, &cfg.eval, &eval_cfg)?;
        let n = records.len().max(1) as f64;
        metrics.push(RoundMetrics {
            round: round + 1,
            pre_success: pre,
            post_success: post,
            episodes: records.len(),
            buffer_samples,
            dataset_samples: dataset.len(),
            collab_success: records.iter().filter(|r| r.success).count() as f64 / n,
            mean_steps: records.iter().map(|r| r.total_steps() as f64).sum::<f64>() / n,
            mean_expert_steps: records.iter().map(|r| r.expert_steps as f64).sum::<f64>() / n,
            initial_probe_loss: fit.initial_probe_loss,
            final_probe_loss: fit.final_probe_loss,
        });
        log::info!("round {}: policy success {pre:.3} -> {post:.3}", round + 1);
        pre = post;
        all_records.extend(records);
    }
    Ok(LoopOutcome { agent, metrics, dataset, records: all_records })
}

/// Behavior-clones a fresh policy from demonstrations. `stats` normally
/// come from the full multi-task demonstration set, since single-task data
/// can be degenerate in some action dimension.
pub fn bootstrap_agent(
    demos: &Dataset,
    stats: NormStats,
    arch: Architecture,
    train: &TrainConfig,
) -> Result<(Agent, FitReport), LoopError> {
    stats.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x1A17);
    let params = PolicyParams::init(arch, &mut rng);
    let fit = fit(&params, demos, &stats, train)?;
    Ok((Agent { params: fit.params.clone(), stats }, fit))
}

/// Action statistics over a demonstration set.
pub fn demo_stats(demos: &Dataset) -> Result<NormStats, LoopError> {
    Ok(compute_stats(&demos.actions())?)
}
