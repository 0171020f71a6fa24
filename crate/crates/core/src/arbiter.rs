//! Fixed-ratio shared control: N policy steps followed by one expert step,
//! repeated until success or the step cap.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, Env, EnvError, TaskId, WorldState, FAILURE_THRESHOLD};
use crate::expert::{Expert, ExpertContext, ExpertError};
use crate::obs::{Instruction, NormStats, ObsMode, ObservationEncoder};
use crate::policy::{PolicyError, PolicyParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Actor {
    Policy,
    Expert,
}

impl Actor {
    pub fn as_str(self) -> &'static str {
        match self {
            Actor::Policy => "policy",
            Actor::Expert => "expert",
        }
    }
}

/// Who controls which step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    PolicyOnly,
    ExpertOnly,
    /// `n` policy steps, then one expert step.
    Interleave(u32),
}

impl Schedule {
    /// Actor for the 1-based step `i`.
    pub fn actor(self, i: u32) -> Actor {
        match self {
            Schedule::PolicyOnly => Actor::Policy,
            Schedule::ExpertOnly => Actor::Expert,
            Schedule::Interleave(n) if i.is_multiple_of(n + 1) => Actor::Expert,
            Schedule::Interleave(_) => Actor::Policy,
        }
    }

    pub fn needs_policy(self) -> bool {
        self != Schedule::ExpertOnly
    }

    pub fn needs_expert(self) -> bool {
        self != Schedule::PolicyOnly
    }

    pub fn label(self) -> String {
        match self {
            Schedule::PolicyOnly => "policy-only".into(),
            Schedule::ExpertOnly => "expert-only".into(),
            Schedule::Interleave(n) => format!("N={n}"),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "policy-only" => Some(Schedule::PolicyOnly),
            "expert-only" => Some(Schedule::ExpertOnly),
            _ => {
                let n: u32 = s.strip_prefix("N=").unwrap_or(s).parse().ok()?;
                (n >= 1).then_some(Schedule::Interleave(n))
            }
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArbiterConfig {
    pub schedule: Schedule,
    pub failure_threshold: u32,
    pub obs_mode: ObsMode,
    pub history: usize,
}

impl ArbiterConfig {
    pub fn new(schedule: Schedule) -> Self {
        Self { schedule, failure_threshold: FAILURE_THRESHOLD, obs_mode: ObsMode::StateVector, history: 1 }
    }

    pub fn validate(&self) -> Result<(), ArbiterError> {
        if let Schedule::Interleave(0) = self.schedule {
            return Err(ArbiterError::Config("N must be at least 1".into()));
        }
        if self.failure_threshold == 0 || self.failure_threshold > FAILURE_THRESHOLD {
            return Err(ArbiterError::Config(format!("failure threshold must lie in 1..={FAILURE_THRESHOLD}")));
        }
        if self.history == 0 {
            return Err(ArbiterError::Config("history must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ArbiterError {
    #[error("invalid arbiter config: {0}")]
    Config(String),
    #[error("schedule needs a policy but none was given")]
    MissingPolicy,
    #[error(transparent)]
    Expert(#[from] ExpertError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("episode aborted")]
    Aborted,
}

/// Policy snapshot plus the action statistics it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    pub params: PolicyParams,
    pub stats: NormStats,
}

impl Agent {
    pub fn act(&self, instruction: &Instruction, features: &[f64]) -> Result<Action, PolicyError> {
        let mut input = instruction.one_hot.clone();
        input.extend_from_slice(features);
        self.params.act_input(&input, &self.stats)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based.
    pub step: u32,
    pub actor: Actor,
    /// Observation features the acting party was shown.
    pub obs: Vec<f64>,
    pub action: Action,
    /// Ticks charged for this step.
    pub ticks: u64,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub task: TaskId,
    pub seed: u64,
    pub schedule: Schedule,
    pub steps: Vec<StepRecord>,
    pub success: bool,
    pub expert_steps: u32,
    pub ticks: u64,
    /// Whether observation augmentation was active (never during rollouts).
    pub augmented: bool,
}

impl EpisodeRecord {
    pub fn total_steps(&self) -> u32 {
        self.steps.len() as u32
    }

    /// Expert steps over total steps.
    pub fn expert_fraction(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.expert_steps as f64 / self.steps.len() as f64
    }

    /// Checks that the actor pattern matches the schedule exactly.
    pub fn schedule_consistent(&self) -> bool {
        self.steps.iter().enumerate().all(|(i, s)| s.step == i as u32 + 1 && s.actor == self.schedule.actor(s.step))
            && self.expert_steps as usize == self.steps.iter().filter(|s| s.actor == Actor::Expert).count()
    }
}

/// Receives every executed step; returning `false` aborts the episode.
pub trait StepObserver {
    fn on_step(&mut self, _state: &WorldState, _record: &StepRecord) -> bool {
        true
    }
}

impl StepObserver for () {}

pub fn run_episode(
    env: &Env,
    policy: Option<&Agent>,
    expert: &dyn Expert,
    task: TaskId,
    seed: u64,
    cfg: &ArbiterConfig,
) -> Result<EpisodeRecord, ArbiterError> {
    run_episode_observed(env, policy, expert, task, seed, cfg, &mut ())
}

pub fn run_episode_observed(
    env: &Env,
    policy: Option<&Agent>,
    expert: &dyn Expert,
    task: TaskId,
    seed: u64,
    cfg: &ArbiterConfig,
    observer: &mut dyn StepObserver,
) -> Result<EpisodeRecord, ArbiterError> {
    cfg.validate()?;
    if cfg.schedule.needs_policy() && policy.is_none() {
        return Err(ArbiterError::MissingPolicy);
    }
    let instruction = Instruction::new(task);
    let mut encoder = ObservationEncoder::new(cfg.obs_mode, cfg.history);
    let mut state = env.reset(task, seed);
    let mut steps = Vec::new();
    let mut expert_steps = 0u32;
    let mut ticks = 0u64;
    let mut success = false;
    while state.step_count < cfg.failure_threshold {
        let i = state.step_count + 1;
        let obs = encoder.push(env, &state).features();
        let actor = cfg.schedule.actor(i);
        let (action, cost) = match actor {
            Actor::Policy => (policy.expect("checked above").act(&instruction, &obs)?, 1),
            Actor::Expert => {
                let ctx = ExpertContext { task, seed, step: i };
                expert_steps += 1;
                (expert.act(env, &state, &ctx)?, expert.latency_ticks())
            }
        };
        let t = env.step(&state, &action)?;
        ticks += cost;
        state = t.state;
        let record = StepRecord { step: i, actor, obs, action, ticks: cost, success: t.success };
        let keep_going = observer.on_step(&state, &record);
        steps.push(record);
        if !keep_going {
            return Err(ArbiterError::Aborted);
        }
        if t.success {
            success = true;
            break;
        }
    }
    Ok(EpisodeRecord { task, seed, schedule: cfg.schedule, steps, success, expert_steps, ticks, augmented: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expert::{ExpertKind, ScriptedController};
    use crate::obs::HeadKind;
    use crate::policy::Architecture;

    /// Expert that never moves.
    struct Still;

    impl Expert for Still {
        fn kind(&self) -> ExpertKind {
            ExpertKind::Scripted
        }

        fn act(&self, _: &Env, s: &WorldState, _: &ExpertContext) -> Result<Action, ExpertError> {
            Ok(Action { dx: 0.0, dy: 0.0, grip: if s.gripper_closed { 1.0 } else { -1.0 } })
        }

        fn latency_ticks(&self) -> u64 {
            3
        }
    }

    fn zero_agent() -> Agent {
        let arch = Architecture::new(ObsMode::StateVector, 1, vec![4], HeadKind::Continuous, 256);
        Agent {
            params: PolicyParams::zeros(arch),
            stats: NormStats { min: [-1.0; 3], max: [1.0; 3], mean: [0.0, 0.0, -1.0], std: [1.0; 3] },
        }
    }

    #[test]
    fn schedule_pattern() {
        let s = Schedule::Interleave(1);
        let pattern: Vec<Actor> = (1..=4).map(|i| s.actor(i)).collect();
        assert_eq!(pattern, vec![Actor::Policy, Actor::Expert, Actor::Policy, Actor::Expert]);
        assert_eq!(Schedule::Interleave(4).actor(1), Actor::Policy);
        assert_eq!(Schedule::Interleave(4).actor(5), Actor::Expert);
        assert_eq!(Schedule::parse("N=8"), Some(Schedule::Interleave(8)));
        assert_eq!(Schedule::parse("N=0"), None);
        for s in [Schedule::PolicyOnly, Schedule::ExpertOnly, Schedule::Interleave(16)] {
            assert_eq!(Schedule::parse(&s.label()), Some(s));
        }
    }

    #[test]
    fn full_length_episode_at_n4() {
        let env = Env::default();
        let agent = zero_agent();
        let cfg = ArbiterConfig::new(Schedule::Interleave(4));
        let r = run_episode(&env, Some(&agent), &Still, TaskId::Push, 3, &cfg).unwrap();
        assert_eq!(r.total_steps(), 500);
        assert_eq!(r.expert_steps, 100);
        assert_eq!(r.ticks, 400 + 300);
        assert!((r.expert_fraction() - 0.2).abs() < 1e-12);
        assert!(r.schedule_consistent());
    }

    #[test]
    fn policy_only_has_no_expert_steps() {
        let env = Env::default();
        let agent = zero_agent();
        let cfg = ArbiterConfig::new(Schedule::PolicyOnly);
        let r = run_episode(&env, Some(&agent), &Still, TaskId::DrawerOpen, 1, &cfg).unwrap();
        assert_eq!(r.expert_steps, 0);
        assert_eq!(r.expert_fraction(), 0.0);
    }

    #[test]
    fn expert_only_fraction_is_one_and_stops_on_success() {
        let env = Env::default();
        let cfg = ArbiterConfig::new(Schedule::ExpertOnly);
        let r = run_episode(&env, None, &ScriptedController::default(), TaskId::Reach, 2, &cfg).unwrap();
        assert!(r.success);
        assert_eq!(r.expert_fraction(), 1.0);
        assert!(r.steps.last().unwrap().success);
        assert!(r.steps[..r.steps.len() - 1].iter().all(|s| !s.success));
    }

    #[test]
    fn missing_policy_is_an_error() {
        let env = Env::default();
        let cfg = ArbiterConfig::new(Schedule::Interleave(2));
        assert!(matches!(
            run_episode(&env, None, &Still, TaskId::Reach, 0, &cfg),
            Err(ArbiterError::MissingPolicy)
        ));
    }

    struct StopAt(u32);

    impl StepObserver for StopAt {
        fn on_step(&mut self, s: &WorldState, _: &StepRecord) -> bool {
            s.step_count < self.0
        }
    }

    #[test]
    fn observer_can_abort() {
        let env = Env::default();
        let cfg = ArbiterConfig::new(Schedule::ExpertOnly);
        let err = run_episode_observed(&env, None, &Still, TaskId::Push, 0, &cfg, &mut StopAt(7)).unwrap_err();
        assert!(matches!(err, ArbiterError::Aborted));
    }
}
