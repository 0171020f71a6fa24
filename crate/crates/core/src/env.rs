//! Planar manipulation world with ten tasks.
//!
//! The world is a unit square holding a disc gripper, one manipulated entity
//! (a free object, a peg, or the handle of an articulated mechanism) and a
//! target. Every transition is a pure function of `(state, action)`, so any
//! number of episodes can run side by side.

use std::f64::consts::FRAC_PI_2;
use std::fmt;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lower action bound shared by every action dimension.
pub const A_MIN: f64 = -1.0;
/// Upper action bound shared by every action dimension.
pub const A_MAX: f64 = 1.0;
/// Episode step cap; an episode that has not succeeded by then is a failure.
pub const FAILURE_THRESHOLD: u32 = 500;
/// Side length of the rendered raster.
pub const RASTER_SIDE: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("malformed action: component {index} is not finite ({value})")]
    MalformedAction { index: usize, value: f64 },
    #[error("episode already terminated at step {0}")]
    Terminated(u32),
    #[error("unknown task name `{0}`")]
    UnknownTask(String),
}

/// Continuous planar command: translation in workspace steps plus a gripper
/// command (`grip > 0` closes the gripper).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub dx: f64,
    pub dy: f64,
    pub grip: f64,
}

impl Action {
    pub const DIM: usize = 3;

    /// Builds an action, rejecting non-finite components and clamping the
    /// rest into `[A_MIN, A_MAX]`.
    pub fn new(dx: f64, dy: f64, grip: f64) -> Result<Self, EnvError> {
        Self::from_array([dx, dy, grip])
    }

    pub fn from_array(a: [f64; 3]) -> Result<Self, EnvError> {
        for (index, &value) in a.iter().enumerate() {
            if !value.is_finite() {
                return Err(EnvError::MalformedAction { index, value });
            }
        }
        Ok(Self {
            dx: a[0].clamp(A_MIN, A_MAX),
            dy: a[1].clamp(A_MIN, A_MAX),
            grip: a[2].clamp(A_MIN, A_MAX),
        })
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.dx, self.dy, self.grip]
    }

    pub fn is_valid(&self) -> bool {
        self.to_array()
            .iter()
            .all(|v| v.is_finite() && (A_MIN..=A_MAX).contains(v))
    }
}

/// The ten-task suite, in the order of the reference benchmark table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    WindowOpen,
    Reach,
    PegInsert,
    DrawerClose,
    DrawerOpen,
    Push,
    ButtonPress,
    WindowClose,
    PickPlace,
    DoorOpen,
}

impl TaskId {
    pub const ALL: [TaskId; 10] = [
        TaskId::WindowOpen,
        TaskId::Reach,
        TaskId::PegInsert,
        TaskId::DrawerClose,
        TaskId::DrawerOpen,
        TaskId::Push,
        TaskId::ButtonPress,
        TaskId::WindowClose,
        TaskId::PickPlace,
        TaskId::DoorOpen,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::WindowOpen => "window open",
            TaskId::Reach => "reach",
            TaskId::PegInsert => "peg insert",
            TaskId::DrawerClose => "drawer close",
            TaskId::DrawerOpen => "drawer open",
            TaskId::Push => "push",
            TaskId::ButtonPress => "button press",
            TaskId::WindowClose => "window close",
            TaskId::PickPlace => "pick place",
            TaskId::DoorOpen => "door open",
        }
    }

    pub fn index(self) -> usize {
        TaskId::ALL.iter().position(|&t| t == self).unwrap()
    }

    pub fn from_name(name: &str) -> Result<Self, EnvError> {
        let wanted = name.trim().replace(['_', '-'], " ");
        TaskId::ALL
            .into_iter()
            .find(|t| t.name() == wanted)
            .ok_or_else(|| EnvError::UnknownTask(name.to_string()))
    }

    /// Articulated mechanism driven by this task, if any.
    pub fn mechanism(self) -> Option<Mechanism> {
        let m = match self {
            TaskId::DrawerOpen => Mechanism {
                path: MechanismPath::Linear { axis: [0.0, -1.0], travel: 0.30 },
                drive: Drive::Grasp,
                goal: 1.0,
                start: 0.0,
            },
            TaskId::DrawerClose => Mechanism {
                path: MechanismPath::Linear { axis: [0.0, -1.0], travel: 0.30 },
                drive: Drive::Push { toward: 0.0 },
                goal: 0.0,
                start: 1.0,
            },
            TaskId::WindowOpen => Mechanism {
                path: MechanismPath::Linear { axis: [1.0, 0.0], travel: 0.35 },
                drive: Drive::Slide,
                goal: 1.0,
                start: 0.0,
            },
            TaskId::WindowClose => Mechanism {
                path: MechanismPath::Linear { axis: [1.0, 0.0], travel: 0.35 },
                drive: Drive::Slide,
                goal: 0.0,
                start: 1.0,
            },
            TaskId::ButtonPress => Mechanism {
                path: MechanismPath::Linear { axis: [0.0, 1.0], travel: 0.08 },
                drive: Drive::Push { toward: 1.0 },
                goal: 1.0,
                start: 0.0,
            },
            TaskId::DoorOpen => Mechanism {
                path: MechanismPath::Arc { radius: 0.25 },
                drive: Drive::Grasp,
                goal: 1.0,
                start: 0.0,
            },
            _ => return None,
        };
        Some(m)
    }

    /// Whether the manipulated entity is a free object that can be grasped.
    pub fn graspable(self) -> bool {
        matches!(self, TaskId::PickPlace | TaskId::PegInsert)
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Geometry of a 1-D articulated mechanism. Articulation 0 is the closed
/// (or unpressed) configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MechanismPath {
    /// Handle slides along `axis` by `travel * articulation`.
    Linear { axis: [f64; 2], travel: f64 },
    /// Handle swings counter-clockwise about a hinge by a quarter turn.
    Arc { radius: f64 },
}

/// How the gripper engages the handle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Drive {
    /// Closed gripper near the handle holds it; the gripper is then bound to
    /// the mechanism path and drags it both ways.
    Grasp,
    /// Contact near the handle drags it both ways along the path.
    Slide,
    /// Contact only moves the handle towards articulation `toward`.
    Push { toward: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mechanism {
    pub path: MechanismPath,
    pub drive: Drive,
    pub goal: f64,
    pub start: f64,
}

impl Mechanism {
    /// Handle position given the mechanism anchor (closed-handle position,
    /// or the hinge for arcs) and articulation.
    pub fn handle(&self, anchor: [f64; 2], art: f64) -> [f64; 2] {
        match self.path {
            MechanismPath::Linear { axis, travel } => [
                anchor[0] + axis[0] * travel * art,
                anchor[1] + axis[1] * travel * art,
            ],
            MechanismPath::Arc { radius } => {
                let theta = art * FRAC_PI_2;
                [anchor[0] + radius * theta.cos(), anchor[1] + radius * theta.sin()]
            }
        }
    }

    /// Inverse of [`Mechanism::handle`] for the anchor.
    pub fn anchor(&self, handle: [f64; 2], art: f64) -> [f64; 2] {
        match self.path {
            MechanismPath::Linear { axis, travel } => [
                handle[0] - axis[0] * travel * art,
                handle[1] - axis[1] * travel * art,
            ],
            MechanismPath::Arc { radius } => {
                let theta = art * FRAC_PI_2;
                [handle[0] - radius * theta.cos(), handle[1] - radius * theta.sin()]
            }
        }
    }

    /// Articulation change produced by moving the gripper by `delta` while
    /// engaged at articulation `art`.
    fn articulation_rate(&self, art: f64, delta: [f64; 2]) -> f64 {
        match self.path {
            MechanismPath::Linear { axis, travel } => {
                (delta[0] * axis[0] + delta[1] * axis[1]) / travel
            }
            MechanismPath::Arc { radius } => {
                let theta = art * FRAC_PI_2;
                let tangent = [-theta.sin(), theta.cos()];
                (delta[0] * tangent[0] + delta[1] * tangent[1]) / radius / FRAC_PI_2
            }
        }
    }

    /// Unit direction in which the handle moves as articulation increases.
    pub fn opening_direction(&self, art: f64) -> [f64; 2] {
        match self.path {
            MechanismPath::Linear { axis, .. } => axis,
            MechanismPath::Arc { .. } => {
                let theta = art * FRAC_PI_2;
                [-theta.sin(), theta.cos()]
            }
        }
    }
}

/// Axis-aligned sampling box for initial positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Region {
    pub const fn new(min: [f64; 2], max: [f64; 2]) -> Self {
        Self { min, max }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> [f64; 2] {
        [
            lerp(self.min[0], self.max[0], rng.random::<f64>()),
            lerp(self.min[1], self.max[1], rng.random::<f64>()),
        ]
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Per-task success threshold and randomization ranges.
///
/// For free-object tasks `object` and `target` are sampled directly. For
/// articulated tasks `object` is the mechanism anchor and the target is the
/// handle position at the goal articulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: TaskId,
    pub success_threshold: f64,
    pub gripper: Region,
    pub object: Region,
    pub target: Region,
    /// Minimum object-to-target distance at reset (free-object tasks).
    #[serde(default)]
    pub min_separation: f64,
}

impl TaskSpec {
    pub fn default_for(task: TaskId) -> Self {
        let gripper = Region::new([0.1, 0.1], [0.9, 0.9]);
        let none = Region::new([0.0, 0.0], [0.0, 0.0]);
        let (success_threshold, object, target, min_separation) = match task {
            TaskId::Reach => (0.03, none, Region::new([0.1, 0.1], [0.9, 0.9]), 0.0),
            TaskId::Push => (
                0.04,
                Region::new([0.3, 0.3], [0.7, 0.7]),
                Region::new([0.2, 0.2], [0.8, 0.8]),
                0.15,
            ),
            TaskId::PickPlace => (
                0.03,
                Region::new([0.2, 0.2], [0.8, 0.8]),
                Region::new([0.2, 0.2], [0.8, 0.8]),
                0.15,
            ),
            TaskId::PegInsert => (
                0.03,
                Region::new([0.15, 0.2], [0.5, 0.8]),
                Region::new([0.8, 0.3], [0.85, 0.7]),
                0.0,
            ),
            TaskId::DrawerOpen | TaskId::DrawerClose => {
                (0.03, Region::new([0.3, 0.55], [0.7, 0.7]), none, 0.0)
            }
            TaskId::WindowOpen | TaskId::WindowClose => {
                (0.03, Region::new([0.2, 0.7], [0.4, 0.85]), none, 0.0)
            }
            TaskId::ButtonPress => (0.01, Region::new([0.2, 0.75], [0.8, 0.85]), none, 0.0),
            TaskId::DoorOpen => (0.03, Region::new([0.3, 0.3], [0.5, 0.5]), none, 0.0),
        };
        Self { task, success_threshold, gripper, object, target, min_separation }
    }
}

/// Physics constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Physics {
    /// Gripper displacement per unit action.
    pub max_step: f64,
    /// A closed gripper within this distance holds a free object.
    pub grasp_radius: f64,
    /// A gripper within this distance of a handle engages it.
    pub engage_radius: f64,
    /// Contact radii for the push task.
    pub gripper_radius: f64,
    pub object_radius: f64,
    /// Peg-insert slot: wall sits this far left of the target, the opening
    /// has this half width.
    pub wall_offset: f64,
    pub slot_half_width: f64,
}

impl Default for Physics {
    fn default() -> Self {
        Self {
            max_step: 0.05,
            grasp_radius: 0.04,
            engage_radius: 0.04,
            gripper_radius: 0.03,
            object_radius: 0.03,
            wall_offset: 0.06,
            slot_half_width: 0.015,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub task: TaskId,
    pub gripper_pos: [f64; 2],
    pub gripper_closed: bool,
    /// Free object, peg, or mechanism handle.
    pub object_pos: [f64; 2],
    pub articulation: f64,
    pub target_pos: [f64; 2],
    pub step_count: u32,
    pub success: bool,
}

impl WorldState {
    pub fn is_terminal(&self) -> bool {
        self.success || self.step_count >= FAILURE_THRESHOLD
    }

    /// Anchor of the articulated mechanism, if the task has one.
    pub fn anchor(&self) -> Option<[f64; 2]> {
        self.task.mechanism().map(|m| m.anchor(self.object_pos, self.articulation))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: WorldState,
    pub done: bool,
    pub success: bool,
}

/// The environment: physics plus per-task specs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Env {
    pub physics: Physics,
    pub tasks: Vec<TaskSpec>,
}

impl Default for Env {
    fn default() -> Self {
        Self {
            physics: Physics::default(),
            tasks: TaskId::ALL.iter().map(|&t| TaskSpec::default_for(t)).collect(),
        }
    }
}

impl Env {
    pub fn spec(&self, task: TaskId) -> &TaskSpec {
        self.tasks
            .iter()
            .find(|s| s.task == task)
            .expect("every task has a spec")
    }

    pub fn task_ids(&self) -> Vec<TaskId> {
        self.tasks.iter().map(|s| s.task).collect()
    }

    /// Wall x coordinate for the peg-insert task.
    pub fn wall_x(&self, state: &WorldState) -> f64 {
        state.target_pos[0] - self.physics.wall_offset
    }

    /// Samples an initial state. Identical `(task, seed)` pairs always give
    /// identical states.
    pub fn reset(&self, task: TaskId, seed: u64) -> WorldState {
        let spec = self.spec(task);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((task.index() as u64 + 1) << 56));
        let gripper_pos = spec.gripper.sample(&mut rng);
        let (object_pos, articulation, target_pos) = match task.mechanism() {
            Some(m) => {
                let anchor = spec.object.sample(&mut rng);
                (m.handle(anchor, m.start), m.start, m.handle(anchor, m.goal))
            }
            None if task == TaskId::Reach => ([0.0, 0.0], 0.0, spec.target.sample(&mut rng)),
            None => {
                let object = spec.object.sample(&mut rng);
                let mut target = spec.target.sample(&mut rng);
                // Rejection sampling with a bounded number of draws.
                for _ in 0..64 {
                    if dist(object, target) >= spec.min_separation {
                        break;
                    }
                    target = spec.target.sample(&mut rng);
                }
                (object, 0.0, target)
            }
        };
        WorldState {
            task,
            gripper_pos,
            gripper_closed: false,
            object_pos,
            articulation,
            target_pos,
            step_count: 0,
            success: false,
        }
    }

    pub fn step(&self, state: &WorldState, action: &Action) -> Result<Transition, EnvError> {
        let action = Action::from_array(action.to_array())?;
        if state.is_terminal() {
            return Err(EnvError::Terminated(state.step_count));
        }
        let p = &self.physics;
        let mut next = *state;
        next.gripper_closed = action.grip > 0.0;
        let old_g = state.gripper_pos;
        let new_g = clamp_unit([
            old_g[0] + action.dx * p.max_step,
            old_g[1] + action.dy * p.max_step,
        ]);
        let delta = sub(new_g, old_g);
        next.gripper_pos = new_g;

        match state.task.mechanism() {
            Some(m) => self.drive_mechanism(&m, state, &mut next, delta),
            None if state.task.graspable() => self.carry_object(state, &mut next, delta),
            None if state.task == TaskId::Push => self.resolve_contact(&mut next, delta),
            None => {}
        }

        next.step_count = state.step_count + 1;
        next.success = self.success(&next);
        let done = next.success || next.step_count >= FAILURE_THRESHOLD;
        Ok(Transition { state: next, done, success: next.success })
    }

    fn drive_mechanism(&self, m: &Mechanism, old: &WorldState, next: &mut WorldState, delta: [f64; 2]) {
        let engaged = dist(old.gripper_pos, old.object_pos) < self.physics.engage_radius;
        if !engaged {
            return;
        }
        let anchor = m.anchor(old.object_pos, old.articulation);
        let rate = m.articulation_rate(old.articulation, delta);
        let new_art = match m.drive {
            Drive::Grasp if next.gripper_closed => old.articulation + rate,
            Drive::Grasp => return,
            Drive::Slide => old.articulation + rate,
            Drive::Push { toward } => {
                let sign = if toward > old.articulation { 1.0 } else { -1.0 };
                if rate * sign > 0.0 {
                    old.articulation + rate
                } else {
                    return;
                }
            }
        }
        .clamp(0.0, 1.0);
        next.articulation = new_art;
        next.object_pos = m.handle(anchor, new_art);
        if matches!(m.drive, Drive::Grasp) {
            // A held handle binds the gripper to the mechanism path.
            next.gripper_pos = clamp_unit(next.object_pos);
        }
    }

    fn carry_object(&self, old: &WorldState, next: &mut WorldState, delta: [f64; 2]) {
        let held = next.gripper_closed && dist(old.gripper_pos, old.object_pos) < self.physics.grasp_radius;
        if !held {
            return;
        }
        let mut obj = clamp_unit(add(old.object_pos, delta));
        if old.task == TaskId::PegInsert {
            let wall_x = self.wall_x(old);
            let r = self.physics.object_radius;
            let ty = old.target_pos[1];
            let half = self.physics.slot_half_width;
            let in_slot = |y: f64| (y - ty).abs() <= half;
            if obj[0] > wall_x - r && !in_slot(obj[1]) {
                if old.object_pos[0] <= wall_x - r {
                    obj[0] = wall_x - r;
                } else {
                    obj[1] = obj[1].clamp(ty - half, ty + half);
                }
            }
        }
        let correction = sub(obj, add(old.object_pos, delta));
        next.object_pos = obj;
        // The held object drags the gripper back when it is blocked.
        next.gripper_pos = clamp_unit(add(next.gripper_pos, correction));
    }

    fn resolve_contact(&self, next: &mut WorldState, delta: [f64; 2]) {
        let contact = self.physics.gripper_radius + self.physics.object_radius;
        let g = next.gripper_pos;
        let o = next.object_pos;
        let d = dist(g, o);
        if d >= contact {
            return;
        }
        let normal = if d > 1e-12 {
            [(o[0] - g[0]) / d, (o[1] - g[1]) / d]
        } else {
            let n = norm(delta);
            if n > 1e-12 {
                [delta[0] / n, delta[1] / n]
            } else {
                [1.0, 0.0]
            }
        };
        next.object_pos = clamp_unit([g[0] + normal[0] * contact, g[1] + normal[1] * contact]);
    }

    /// Task success predicate.
    pub fn success(&self, state: &WorldState) -> bool {
        let thr = self.spec(state.task).success_threshold;
        match state.task {
            TaskId::Reach => dist(state.gripper_pos, state.target_pos) < thr,
            _ => dist(state.object_pos, state.target_pos) < thr,
        }
    }

    /// Renders a grayscale raster. Rows run top to bottom (row 0 is y = 1).
    ///
    /// Intensity bands: background 0.0, wall 0.15, target 0.3, object or
    /// handle 0.55, open gripper 0.8, closed gripper 1.0.
    pub fn render_raster(&self, state: &WorldState) -> Array2<f64> {
        let mut img = Array2::<f64>::zeros((RASTER_SIDE, RASTER_SIDE));
        if state.task == TaskId::PegInsert {
            let col = cell(self.wall_x(state));
            let slot = [
                cell_row(state.target_pos[1] - self.physics.slot_half_width),
                cell_row(state.target_pos[1] + self.physics.slot_half_width),
            ];
            for row in 0..RASTER_SIDE {
                if row > slot[0] || row < slot[1] {
                    img[[row, col]] = 0.15;
                }
            }
        }
        stamp(&mut img, state.target_pos, 0.3);
        if state.task != TaskId::Reach {
            stamp(&mut img, state.object_pos, 0.55);
        }
        stamp(&mut img, state.gripper_pos, if state.gripper_closed { 1.0 } else { 0.8 });
        img
    }
}

fn cell(x: f64) -> usize {
    ((x * RASTER_SIDE as f64).floor() as isize).clamp(0, RASTER_SIDE as isize - 1) as usize
}

fn cell_row(y: f64) -> usize {
    RASTER_SIDE - 1 - cell(y)
}

/// Paints the 3x3 block of cells centred on `pos`.
fn stamp(img: &mut Array2<f64>, pos: [f64; 2], value: f64) {
    let (r, c) = (cell_row(pos[1]) as isize, cell(pos[0]) as isize);
    for dr in -1..=1 {
        for dc in -1..=1 {
            let (rr, cc) = (r + dr, c + dc);
            if (0..RASTER_SIDE as isize).contains(&rr) && (0..RASTER_SIDE as isize).contains(&cc) {
                img[[rr as usize, cc as usize]] = value;
            }
        }
    }
}

pub(crate) fn clamp_unit(p: [f64; 2]) -> [f64; 2] {
    [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0)]
}

pub(crate) fn add(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] + b[0], a[1] + b[1]]
}

pub(crate) fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

pub(crate) fn norm(a: [f64; 2]) -> f64 {
    a[0].hypot(a[1])
}

pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    norm(sub(a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reach_state(g: [f64; 2], t: [f64; 2]) -> WorldState {
        WorldState {
            task: TaskId::Reach,
            gripper_pos: g,
            gripper_closed: false,
            object_pos: [0.0, 0.0],
            articulation: 0.0,
            target_pos: t,
            step_count: 0,
            success: false,
        }
    }

    #[test]
    fn task_names_match_suite() {
        let names: Vec<_> = TaskId::ALL.iter().map(|t| t.name()).collect();
        assert_eq!(
            names,
            [
                "window open", "reach", "peg insert", "drawer close", "drawer open", "push",
                "button press", "window close", "pick place", "door open"
            ]
        );
        for t in TaskId::ALL {
            assert_eq!(TaskId::from_name(t.name()).unwrap(), t);
        }
        assert!(TaskId::from_name("stack blocks").is_err());
    }

    #[test]
    fn reset_is_deterministic() {
        let env = Env::default();
        assert_eq!(env.reset(TaskId::Reach, 7), env.reset(TaskId::Reach, 7));
    }

    #[test]
    fn different_seeds_differ() {
        let env = Env::default();
        let a = env.reset(TaskId::Reach, 7);
        let b = env.reset(TaskId::Reach, 8);
        assert!(a.gripper_pos != b.gripper_pos || a.target_pos != b.target_pos);
    }

    #[test]
    fn drawer_starts_closed() {
        let env = Env::default();
        for seed in 0..50 {
            let s = env.reset(TaskId::DrawerOpen, seed);
            assert_eq!(s.articulation, 0.0);
            assert_eq!(s.step_count, 0);
        }
    }

    #[test]
    fn saturated_move_right() {
        let env = Env::default();
        let s = reach_state([0.5, 0.5], [0.9, 0.9]);
        let t = env.step(&s, &Action::new(1.0, 0.0, -1.0).unwrap()).unwrap();
        assert!((t.state.gripper_pos[0] - 0.55).abs() < 1e-12);
        assert_eq!(t.state.gripper_pos[1], 0.5);
        assert!(!t.state.gripper_closed);
    }

    #[test]
    fn zero_action_only_advances_clock() {
        let env = Env::default();
        for task in TaskId::ALL {
            let s = env.reset(task, 3);
            let t = env.step(&s, &Action::default()).unwrap();
            assert_eq!(t.state.gripper_pos, s.gripper_pos);
            assert_eq!(t.state.object_pos, s.object_pos);
            assert_eq!(t.state.step_count, 1);
        }
    }

    #[test]
    fn reach_success_terminates() {
        let env = Env::default();
        let s = reach_state([0.5, 0.5], [0.52, 0.5]);
        let t = env.step(&s, &Action::default()).unwrap();
        assert!(t.success && t.done);
        assert!(matches!(env.step(&t.state, &Action::default()), Err(EnvError::Terminated(1))));
    }

    #[test]
    fn non_finite_action_rejected() {
        let env = Env::default();
        let s = env.reset(TaskId::Reach, 1);
        let bad = Action { dx: f64::NAN, dy: 0.0, grip: 0.0 };
        assert!(matches!(env.step(&s, &bad), Err(EnvError::MalformedAction { index: 0, .. })));
        assert!(Action::new(0.0, f64::INFINITY, 0.0).is_err());
    }

    #[test]
    fn step_cap_ends_episode() {
        let env = Env::default();
        let mut s = reach_state([0.1, 0.1], [0.9, 0.9]);
        s.step_count = FAILURE_THRESHOLD - 1;
        let t = env.step(&s, &Action::default()).unwrap();
        assert!(t.done && !t.success);
    }

    #[test]
    fn grasped_object_follows() {
        let env = Env::default();
        let mut s = env.reset(TaskId::PickPlace, 0);
        s.gripper_pos = [0.5, 0.5];
        s.object_pos = [0.52, 0.5];
        s.target_pos = [0.1, 0.9];
        let t = env.step(&s, &Action::new(0.0, 1.0, 1.0).unwrap()).unwrap();
        assert!((t.state.object_pos[1] - 0.55).abs() < 1e-12);
        // An open gripper leaves it behind.
        let t2 = env.step(&t.state, &Action::new(0.0, 1.0, -1.0).unwrap()).unwrap();
        assert_eq!(t2.state.object_pos, t.state.object_pos);
    }

    #[test]
    fn push_contact_separates_discs() {
        let env = Env::default();
        let mut s = env.reset(TaskId::Push, 0);
        s.gripper_pos = [0.4, 0.5];
        s.object_pos = [0.47, 0.5];
        s.target_pos = [0.9, 0.9];
        let t = env.step(&s, &Action::new(1.0, 0.0, -1.0).unwrap()).unwrap();
        let d = dist(t.state.gripper_pos, t.state.object_pos);
        assert!((d - 0.06).abs() < 1e-12);
        assert!((t.state.object_pos[0] - 0.51).abs() < 1e-12);
    }

    #[test]
    fn peg_blocked_outside_slot() {
        let env = Env::default();
        let mut s = env.reset(TaskId::PegInsert, 0);
        s.target_pos = [0.82, 0.5];
        let wall = env.wall_x(&s);
        s.object_pos = [wall - 0.04, 0.7];
        s.gripper_pos = s.object_pos;
        let t = env.step(&s, &Action::new(1.0, 0.0, 1.0).unwrap()).unwrap();
        assert!((t.state.object_pos[0] - (wall - env.physics.object_radius)).abs() < 1e-12);
        // Gripper is dragged back along with the peg.
        assert_eq!(t.state.gripper_pos, t.state.object_pos);
        // In line with the slot the peg passes.
        s.object_pos = [wall - 0.04, 0.5];
        s.gripper_pos = s.object_pos;
        let t = env.step(&s, &Action::new(1.0, 0.0, 1.0).unwrap()).unwrap();
        assert!(t.state.object_pos[0] > wall);
    }

    #[test]
    fn drawer_pulled_by_closed_gripper_only() {
        let env = Env::default();
        let s0 = env.reset(TaskId::DrawerOpen, 5);
        let mut s = s0;
        s.gripper_pos = s.object_pos;
        let open = env.step(&s, &Action::new(0.0, -1.0, -1.0).unwrap()).unwrap();
        assert_eq!(open.state.articulation, 0.0);
        let pulled = env.step(&s, &Action::new(0.0, -1.0, 1.0).unwrap()).unwrap();
        assert!((pulled.state.articulation - 0.05 / 0.30).abs() < 1e-12);
        assert_eq!(pulled.state.gripper_pos, pulled.state.object_pos);
    }

    #[test]
    fn push_drive_is_one_directional() {
        let env = Env::default();
        let mut s = env.reset(TaskId::ButtonPress, 2);
        s.gripper_pos = [s.object_pos[0], s.object_pos[1] - 0.03];
        let away = env.step(&s, &Action::new(0.0, -1.0, -1.0).unwrap()).unwrap();
        assert_eq!(away.state.articulation, 0.0);
        let press = env.step(&s, &Action::new(0.0, 1.0, -1.0).unwrap()).unwrap();
        assert!(press.state.articulation > 0.0);
    }

    #[test]
    fn door_handle_stays_on_arc() {
        let env = Env::default();
        let mut s = env.reset(TaskId::DoorOpen, 9);
        let hinge = s.anchor().unwrap();
        s.gripper_pos = s.object_pos;
        for _ in 0..10 {
            let t = env.step(&s, &Action::new(-0.5, 1.0, 1.0).unwrap()).unwrap();
            s = t.state;
            assert!((dist(s.object_pos, hinge) - 0.25).abs() < 1e-9);
            if t.done {
                break;
            }
        }
        assert!(s.articulation > 0.3);
    }

    #[test]
    fn raster_background_and_determinism() {
        let env = Env::default();
        let s = env.reset(TaskId::Push, 4);
        let a = env.render_raster(&s);
        assert_eq!(a, env.render_raster(&s));
        assert_eq!(a[[0, 0]].max(a[[31, 31]]).min(a[[0, 31]]), 0.0);
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn raster_diff_is_local_to_gripper() {
        let env = Env::default();
        let mut s = reach_state([0.30, 0.30], [0.8, 0.8]);
        s.gripper_pos = [0.3 + 0.5 / 32.0, 0.3];
        let a = env.render_raster(&s);
        let mut moved = s;
        moved.gripper_pos[0] += 1.0 / 32.0;
        let b = env.render_raster(&moved);
        let touched = |st: &WorldState, r: usize, c: usize| {
            let (gr, gc) = (cell_row(st.gripper_pos[1]) as isize, cell(st.gripper_pos[0]) as isize);
            (r as isize - gr).abs() <= 1 && (c as isize - gc).abs() <= 1
        };
        let mut diffs = 0;
        for ((r, c), v) in a.indexed_iter() {
            if *v != b[[r, c]] {
                diffs += 1;
                assert!(touched(&s, r, c) || touched(&moved, r, c), "cell ({r},{c}) changed");
            }
        }
        assert!(diffs > 0);
    }

    proptest! {
        #[test]
        fn positions_stay_in_workspace(
            task_idx in 0usize..10,
            seed in any::<u64>(),
            actions in proptest::collection::vec((-1.0f64..=1.0, -1.0f64..=1.0, -1.0f64..=1.0), 1..200),
        ) {
            let env = Env::default();
            let mut s = env.reset(TaskId::ALL[task_idx], seed);
            for (dx, dy, g) in actions {
                let t = env.step(&s, &Action::new(dx, dy, g).unwrap()).unwrap();
                s = t.state;
                for v in s.gripper_pos.iter().chain(s.object_pos.iter()) {
                    prop_assert!((0.0..=1.0).contains(v));
                }
                prop_assert!((0.0..=1.0).contains(&s.articulation));
                prop_assert!(s.step_count <= FAILURE_THRESHOLD);
                if t.done { break; }
            }
        }

        #[test]
        fn replay_is_deterministic(seed in any::<u64>(), task_idx in 0usize..10,
            actions in proptest::collection::vec((-1.0f64..=1.0, -1.0f64..=1.0, -1.0f64..=1.0), 1..60)) {
            let env = Env::default();
            let run = || {
                let mut s = env.reset(TaskId::ALL[task_idx], seed);
                let mut trace = vec![s];
                for &(dx, dy, g) in &actions {
                    let t = env.step(&s, &Action::new(dx, dy, g).unwrap()).unwrap();
                    s = t.state;
                    trace.push(s);
                    if t.done { break; }
                }
                trace
            };
            prop_assert_eq!(run(), run());
        }
    }
}
