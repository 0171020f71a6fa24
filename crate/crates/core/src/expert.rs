//! Expert action sources: the scripted per-task controller, the remote
//! human command channel and the slow (latency-charged) and simulated BCI
//! wrappers.

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bci::{self, SynthConfig};
use crate::env::{add, dist, norm, sub, Action, Drive, Env, TaskId, WorldState};

pub const DEFAULT_LATENCY_TICKS: u64 = 48;
pub const DEFAULT_HUMAN_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExpertError {
    #[error("expert timed out after {0:?}")]
    Timeout(Duration),
    #[error("episode aborted by the operator")]
    Aborted,
    #[error("expert channel closed")]
    Disconnected,
    #[error("bci decoder: {0}")]
    Bci(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpertKind {
    Scripted,
    HumanRemote,
    BciSim,
}

impl ExpertKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExpertKind::Scripted => "scripted",
            ExpertKind::HumanRemote => "human-remote",
            ExpertKind::BciSim => "bci-sim",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "scripted" => Some(ExpertKind::Scripted),
            "human-remote" | "human" => Some(ExpertKind::HumanRemote),
            "bci-sim" | "bci" => Some(ExpertKind::BciSim),
            _ => None,
        }
    }
}

/// What an expert knows about the step it is asked to act on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExpertContext {
    pub task: TaskId,
    pub seed: u64,
    /// 1-based index of the step about to be taken.
    pub step: u32,
}

/// An expert policy. Implementations are shared across parallel episodes,
/// so any per-call randomness must derive from the context.
pub trait Expert: Send + Sync {
    fn kind(&self) -> ExpertKind;

    fn act(&self, env: &Env, state: &WorldState, ctx: &ExpertContext) -> Result<Action, ExpertError>;

    /// Simulation ticks charged for one expert decision.
    fn latency_ticks(&self) -> u64 {
        1
    }
}

// ---------------------------------------------------------------------------
// Human command table
// ---------------------------------------------------------------------------

/// Discrete command set offered to human (and BCI) experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Up,
    Down,
    Left,
    Right,
    UpLeft,
    UpRight,
    DownLeft,
    DownRight,
    #[serde(rename = "grip")]
    GripToggle,
    Noop,
}

impl Command {
    pub const ALL: [Command; 10] = [
        Command::Up,
        Command::Down,
        Command::Left,
        Command::Right,
        Command::UpLeft,
        Command::UpRight,
        Command::DownLeft,
        Command::DownRight,
        Command::GripToggle,
        Command::Noop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::Up => "up",
            Command::Down => "down",
            Command::Left => "left",
            Command::Right => "right",
            Command::UpLeft => "up_left",
            Command::UpRight => "up_right",
            Command::DownLeft => "down_left",
            Command::DownRight => "down_right",
            Command::GripToggle => "grip",
            Command::Noop => "noop",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        let s = match s.as_str() {
            "no_op" => "noop",
            "grip_toggle" | "toggle" => "grip",
            other => other,
        };
        Command::ALL.into_iter().find(|c| c.name() == s)
    }

    /// Unit translation in workspace axes (y up).
    pub fn direction(self) -> [f64; 2] {
        match self {
            Command::Up => [0.0, 1.0],
            Command::Down => [0.0, -1.0],
            Command::Left => [-1.0, 0.0],
            Command::Right => [1.0, 0.0],
            Command::UpLeft => [-1.0, 1.0],
            Command::UpRight => [1.0, 1.0],
            Command::DownLeft => [-1.0, -1.0],
            Command::DownRight => [1.0, -1.0],
            Command::GripToggle | Command::Noop => [0.0, 0.0],
        }
    }

    /// Bounded action for this command. Translations and no-op keep the
    /// current grip; the toggle flips it without moving.
    pub fn to_action(self, gripper_closed: bool) -> Action {
        let hold = if gripper_closed { 1.0 } else { -1.0 };
        let [dx, dy] = self.direction();
        let grip = if self == Command::GripToggle { -hold } else { hold };
        Action { dx, dy, grip }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Reply from a human channel for one action request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HumanReply {
    Command(Command),
    Timeout,
    Abort,
}

/// Transport to a remote human (implemented by the session server).
pub trait HumanLink: Send + Sync {
    /// Announces an expert turn and blocks for at most `timeout`.
    fn request(&self, state: &WorldState, ctx: &ExpertContext, timeout: Duration) -> HumanReply;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeoutPolicy {
    /// Keep the episode paused and prompt again.
    Reprompt,
    /// Fall back to the scripted controller for this turn.
    SubstituteScripted,
}

/// Resolves one human turn under the timeout policy.
pub fn human_action(
    link: &dyn HumanLink,
    env: &Env,
    state: &WorldState,
    ctx: &ExpertContext,
    timeout: Duration,
    policy: TimeoutPolicy,
    max_prompts: Option<u32>,
) -> Result<Action, ExpertError> {
    let mut prompts = 0u32;
    loop {
        match link.request(state, ctx, timeout) {
            HumanReply::Command(c) => return Ok(c.to_action(state.gripper_closed)),
            HumanReply::Abort => return Err(ExpertError::Aborted),
            HumanReply::Timeout => {
                log::warn!("human expert timed out at step {} ({:?})", ctx.step, timeout);
                match policy {
                    TimeoutPolicy::SubstituteScripted => return Ok(ScriptedController::default().action(env, state)),
                    TimeoutPolicy::Reprompt => {
                        prompts += 1;
                        if max_prompts.is_some_and(|m| prompts >= m) {
                            return Err(ExpertError::Timeout(timeout));
                        }
                    }
                }
            }
        }
    }
}

/// Human expert reached through a [`HumanLink`].
pub struct HumanExpert<L: HumanLink> {
    pub link: L,
    pub timeout: Duration,
    pub on_timeout: TimeoutPolicy,
    pub max_prompts: Option<u32>,
}

impl<L: HumanLink> Expert for HumanExpert<L> {
    fn kind(&self) -> ExpertKind {
        ExpertKind::HumanRemote
    }

    fn act(&self, env: &Env, state: &WorldState, ctx: &ExpertContext) -> Result<Action, ExpertError> {
        human_action(&self.link, env, state, ctx, self.timeout, self.on_timeout, self.max_prompts)
    }
}

// ---------------------------------------------------------------------------
// Scripted controller
// ---------------------------------------------------------------------------

/// Controller phase, derived from the state on every call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Approach,
    Engage,
    Transport,
    Release,
}

/// Privileged proportional waypoint controller. Stateless: the phase is a
/// function of the world state alone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptedController {
    pub gain: f64,
}

impl Default for ScriptedController {
    fn default() -> Self {
        Self { gain: 1.0 }
    }
}

const CLOSE: f64 = 1.0;
const OPEN: f64 = -1.0;

/// Distance within which the gripper closes while approaching a free object
/// or handle. Closing early is harmless: a grasp only engages from within
/// the grasp radius.
const CLOSE_RADIUS: f64 = 0.1;
/// Distance at which a handle counts as reached.
const GRASP_ALIGN: f64 = 0.01;
/// Clearance added behind a pushed object.
const PUSH_STANDOFF: f64 = 0.03;
/// Lateral offset used to walk around a pushed object.
const PUSH_SIDESTEP: f64 = 0.12;
/// Articulation increment targeted per pull.
const PULL_LOOKAHEAD: f64 = 0.2;

impl ScriptedController {
    pub fn action(&self, env: &Env, state: &WorldState) -> Action {
        self.plan(env, state).1
    }

    /// Current phase and action.
    pub fn plan(&self, env: &Env, state: &WorldState) -> (Phase, Action) {
        let (phase, waypoint, grip) = match state.task {
            TaskId::Reach => (Phase::Approach, state.target_pos, OPEN),
            TaskId::PickPlace | TaskId::PegInsert => self.carry(env, state),
            TaskId::Push => self.push(env, state),
            _ => self.mechanism(env, state),
        };
        (phase, self.toward(env, state.gripper_pos, waypoint, grip))
    }

    fn toward(&self, env: &Env, g: [f64; 2], waypoint: [f64; 2], grip: f64) -> Action {
        let step = env.physics.max_step;
        let d = sub(waypoint, g);
        Action {
            dx: (self.gain * d[0] / step).clamp(-1.0, 1.0),
            dy: (self.gain * d[1] / step).clamp(-1.0, 1.0),
            grip,
        }
    }

    fn carry(&self, env: &Env, s: &WorldState) -> (Phase, [f64; 2], f64) {
        let g = s.gripper_pos;
        let o = s.object_pos;
        let held = s.gripper_closed && dist(g, o) < env.physics.grasp_radius;
        if !held {
            if dist(g, o) < CLOSE_RADIUS {
                return (Phase::Engage, o, CLOSE);
            }
            return (Phase::Approach, o, OPEN);
        }
        if env.success(s) {
            return (Phase::Release, g, OPEN);
        }
        let goal = if s.task == TaskId::PegInsert {
            let t = s.target_pos;
            let half = env.physics.slot_half_width;
            if (o[1] - t[1]).abs() > half / 2.0 {
                // Line up with the slot without backing away from the wall.
                let pre_x = env.wall_x(s) - env.physics.object_radius - 0.02;
                [o[0].max(pre_x), t[1]]
            } else {
                t
            }
        } else {
            s.target_pos
        };
        // Move the object onto the goal; the gripper keeps its grasp offset.
        (Phase::Transport, add(goal, sub(g, o)), CLOSE)
    }

    fn push(&self, env: &Env, s: &WorldState) -> (Phase, [f64; 2], f64) {
        let g = s.gripper_pos;
        let o = s.object_pos;
        let to_target = sub(s.target_pos, o);
        let remaining = norm(to_target);
        if remaining < 1e-12 {
            return (Phase::Release, g, OPEN);
        }
        let dir = [to_target[0] / remaining, to_target[1] / remaining];
        let perp = [-dir[1], dir[0]];
        let rel = sub(g, o);
        let along = rel[0] * dir[0] + rel[1] * dir[1];
        let lateral = rel[0] * perp[0] + rel[1] * perp[1];
        let contact = env.physics.gripper_radius + env.physics.object_radius;
        let behind = |back: f64, side: f64| {
            [o[0] - dir[0] * back + perp[0] * side, o[1] - dir[1] * back + perp[1] * side]
        };
        if along < -PUSH_STANDOFF && lateral.abs() < 0.02 {
            let advance = remaining.min(env.physics.max_step);
            return (Phase::Transport, behind(contact - advance, 0.0), OPEN);
        }
        if along < -PUSH_STANDOFF {
            return (Phase::Approach, behind(contact + PUSH_STANDOFF, 0.0), OPEN);
        }
        let side = if lateral >= 0.0 { PUSH_SIDESTEP } else { -PUSH_SIDESTEP };
        (Phase::Approach, behind(contact - 0.01, side), OPEN)
    }

    fn mechanism(&self, env: &Env, s: &WorldState) -> (Phase, [f64; 2], f64) {
        let m = s.task.mechanism().expect("articulated task");
        let g = s.gripper_pos;
        let h = s.object_pos;
        let anchor = m.anchor(h, s.articulation);
        let sign = if m.goal > s.articulation { 1.0 } else { -1.0 };
        let next_art = s.articulation + sign * (m.goal - s.articulation).abs().min(PULL_LOOKAHEAD);
        match m.drive {
            Drive::Grasp => {
                let holding = s.gripper_closed && dist(g, h) < env.physics.engage_radius;
                if holding {
                    (Phase::Transport, m.handle(anchor, next_art), CLOSE)
                } else if dist(g, h) < GRASP_ALIGN {
                    (Phase::Engage, m.handle(anchor, next_art), CLOSE)
                } else if dist(g, h) < CLOSE_RADIUS {
                    (Phase::Engage, h, CLOSE)
                } else {
                    (Phase::Approach, h, OPEN)
                }
            }
            Drive::Slide => {
                if dist(g, h) < 0.02 {
                    (Phase::Transport, add(g, sub(m.handle(anchor, next_art), h)), OPEN)
                } else {
                    (Phase::Approach, h, OPEN)
                }
            }
            Drive::Push { .. } => {
                let d = m.opening_direction(s.articulation);
                let push = [d[0] * sign, d[1] * sign];
                let contact = sub(h, [push[0] * PUSH_STANDOFF, push[1] * PUSH_STANDOFF]);
                if dist(g, contact) < 0.015 {
                    (Phase::Transport, add(g, sub(s.target_pos, h)), OPEN)
                } else {
                    (Phase::Approach, contact, OPEN)
                }
            }
        }
    }
}

impl Expert for ScriptedController {
    fn kind(&self) -> ExpertKind {
        ExpertKind::Scripted
    }

    fn act(&self, env: &Env, state: &WorldState, _ctx: &ExpertContext) -> Result<Action, ExpertError> {
        Ok(self.action(env, state))
    }
}

/// Wraps an expert and charges `latency_ticks` per decision.
#[derive(Debug, Clone)]
pub struct SlowExpert<E> {
    pub inner: E,
    pub latency_ticks: u64,
}

impl<E: Expert> Expert for SlowExpert<E> {
    fn kind(&self) -> ExpertKind {
        self.inner.kind()
    }

    fn act(&self, env: &Env, state: &WorldState, ctx: &ExpertContext) -> Result<Action, ExpertError> {
        self.inner.act(env, state, ctx)
    }

    fn latency_ticks(&self) -> u64 {
        self.latency_ticks.max(1)
    }
}

/// Command the scripted controller would pick from the BCI vocabulary
/// (left, right, up, grip toggle, or no-op).
pub fn bci_intent(env: &Env, state: &WorldState) -> Command {
    let a = ScriptedController::default().action(env, state);
    if (a.grip > 0.0) != state.gripper_closed {
        return Command::GripToggle;
    }
    let best = [Command::Left, Command::Right, Command::Up]
        .into_iter()
        .map(|c| {
            let d = c.direction();
            (c, d[0] * a.dx + d[1] * a.dy)
        })
        .max_by(|x, y| x.1.total_cmp(&y.1))
        .expect("non-empty");
    if best.1 > 0.1 {
        best.0
    } else {
        Command::Noop
    }
}

/// Simulated SSVEP expert: the intended command is rendered as a synthetic
/// EEG window, decoded with CCA and mapped back to a command.
#[derive(Debug, Clone, PartialEq)]
pub struct BciExpert {
    pub synth: SynthConfig,
    pub margin_threshold: f64,
    pub latency_ticks: u64,
}

impl Default for BciExpert {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            margin_threshold: bci::DEFAULT_MARGIN_THRESHOLD,
            latency_ticks: DEFAULT_LATENCY_TICKS,
        }
    }
}

impl BciExpert {
    /// Intended and decoded command for one turn.
    pub fn decide(&self, env: &Env, state: &WorldState, ctx: &ExpertContext) -> Result<(Command, Command), ExpertError> {
        let intent = bci_intent(env, state);
        let Some(freq) = bci::frequency_for(intent) else {
            return Ok((intent, Command::Noop));
        };
        let seed = ctx.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((ctx.task.index() as u64) << 48) ^ ctx.step as u64;
        let signal = bci::synth(freq, &self.synth, seed).map_err(|e| ExpertError::Bci(e.to_string()))?;
        let result = bci::decode(&signal, &bci::STIMULUS_SET).map_err(|e| ExpertError::Bci(e.to_string()))?;
        Ok((intent, bci::command_map(&result, self.margin_threshold)))
    }
}

impl Expert for BciExpert {
    fn kind(&self) -> ExpertKind {
        ExpertKind::BciSim
    }

    fn act(&self, env: &Env, state: &WorldState, ctx: &ExpertContext) -> Result<Action, ExpertError> {
        let (_, decoded) = self.decide(env, state, ctx)?;
        Ok(decoded.to_action(state.gripper_closed))
    }

    fn latency_ticks(&self) -> u64 {
        self.latency_ticks.max(1)
    }
}

/// Runs the scripted controller alone; returns `(success, steps)`.
pub fn scripted_rollout(env: &Env, task: TaskId, seed: u64) -> (bool, u32) {
    let ctl = ScriptedController::default();
    let mut s = env.reset(task, seed);
    loop {
        let t = env.step(&s, &ctl.action(env, &s)).expect("scripted actions are valid");
        s = t.state;
        if t.done {
            return (t.success, s.step_count);
        }
    }
}
