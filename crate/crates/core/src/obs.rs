//! Observation encoding, instruction one-hots, raster augmentation and
//! action normalization statistics.

use std::collections::VecDeque;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, Env, TaskId, WorldState, FAILURE_THRESHOLD, RASTER_SIDE};

pub const STATE_DIM: usize = 9;
pub const RASTER_DIM: usize = RASTER_SIDE * RASTER_SIDE;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObsError {
    #[error("cannot compute statistics of an empty dataset")]
    EmptyDataset,
    #[error("degenerate statistics in action dimension {dim}: min {min} equals max {max}")]
    Degenerate { dim: usize, min: f64, max: f64 },
    #[error("invalid statistics in action dimension {dim}: {reason}")]
    Invalid { dim: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsMode {
    StateVector,
    Raster,
}

impl ObsMode {
    pub fn frame_dim(self) -> usize {
        match self {
            ObsMode::StateVector => STATE_DIM,
            ObsMode::Raster => RASTER_DIM,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ObsMode::StateVector => "state_vector",
            ObsMode::Raster => "raster",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "state_vector" => Some(ObsMode::StateVector),
            "raster" => Some(ObsMode::Raster),
            _ => None,
        }
    }
}

/// Gripper x,y, gripper closed, object x,y, target x,y, articulation and
/// normalized step count.
pub fn state_vector(state: &WorldState) -> [f64; STATE_DIM] {
    [
        state.gripper_pos[0],
        state.gripper_pos[1],
        if state.gripper_closed { 1.0 } else { 0.0 },
        state.object_pos[0],
        state.object_pos[1],
        state.target_pos[0],
        state.target_pos[1],
        state.articulation,
        state.step_count as f64 / FAILURE_THRESHOLD as f64,
    ]
}

/// Task instruction: a one-hot over the suite plus the canonical task name.
#[derive(Debug, Clone, PartialEq)]
pub struct Instruction {
    pub task: TaskId,
    pub name: &'static str,
    pub one_hot: Vec<f64>,
}

impl Instruction {
    pub fn new(task: TaskId) -> Self {
        let mut one_hot = vec![0.0; TaskId::ALL.len()];
        one_hot[task.index()] = 1.0;
        Self { task, name: task.name(), one_hot }
    }
}

/// Observation with a history of the last `k` frames, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub mode: ObsMode,
    pub k: usize,
    /// Exactly `min(k, frames seen)` frames.
    pub history: Vec<Vec<f64>>,
}

impl Observation {
    /// Concatenated features, zero-padded in front up to `k` frames.
    pub fn features(&self) -> Vec<f64> {
        let dim = self.mode.frame_dim();
        let mut out = vec![0.0; (self.k - self.history.len()) * dim];
        for frame in &self.history {
            out.extend_from_slice(frame);
        }
        out
    }
}

/// Rolling encoder for one episode.
#[derive(Debug, Clone)]
pub struct ObservationEncoder {
    mode: ObsMode,
    k: usize,
    ring: VecDeque<Vec<f64>>,
}

impl ObservationEncoder {
    pub fn new(mode: ObsMode, k: usize) -> Self {
        assert!(k >= 1, "history length must be at least 1");
        Self { mode, k, ring: VecDeque::with_capacity(k) }
    }

    pub fn frame(&self, env: &Env, state: &WorldState) -> Vec<f64> {
        match self.mode {
            ObsMode::StateVector => state_vector(state).to_vec(),
            ObsMode::Raster => env.render_raster(state).into_iter().collect(),
        }
    }

    /// Records the frame for `state` and returns the current observation.
    pub fn push(&mut self, env: &Env, state: &WorldState) -> Observation {
        let f = self.frame(env, state);
        self.push_frame(f)
    }

    pub fn push_frame(&mut self, frame: Vec<f64>) -> Observation {
        if self.ring.len() == self.k {
            self.ring.pop_front();
        }
        self.ring.push_back(frame);
        Observation { mode: self.mode, k: self.k, history: self.ring.iter().cloned().collect() }
    }
}

/// Training-time raster augmentation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Crop side as a fraction of the raster side.
    pub crop_scale: f64,
    /// Brightness factor drawn from `1 ± brightness`.
    pub brightness: f64,
    pub contrast: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { enabled: true, crop_scale: 0.9, brightness: 0.2, contrast: [0.8, 1.2] }
    }
}

/// One concrete draw of augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    /// Crop window `(row0, col0, side)` in pixel units; `None` skips cropping.
    pub crop: Option<(f64, f64, f64)>,
    pub brightness: f64,
    pub contrast: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams { crop: None, brightness: 1.0, contrast: 1.0 };

    pub fn sample<R: Rng>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let n = RASTER_SIDE as f64;
        let side = cfg.crop_scale * n;
        let slack = n - side;
        let row0 = rng.random::<f64>() * slack;
        let col0 = rng.random::<f64>() * slack;
        let brightness = 1.0 + cfg.brightness * (2.0 * rng.random::<f64>() - 1.0);
        let contrast = cfg.contrast[0] + (cfg.contrast[1] - cfg.contrast[0]) * rng.random::<f64>();
        Self { crop: Some((row0, col0, side)), brightness, contrast }
    }
}

/// Random resized crop, brightness and contrast jitter. Identity when
/// augmentation is disabled.
pub fn augment<R: Rng>(raster: &Array2<f64>, cfg: &AugmentConfig, rng: &mut R) -> Array2<f64> {
    if !cfg.enabled {
        return raster.clone();
    }
    apply_augment(raster, &AugmentParams::sample(cfg, rng))
}

pub fn apply_augment(raster: &Array2<f64>, p: &AugmentParams) -> Array2<f64> {
    let (rows, cols) = raster.dim();
    let mut out = match p.crop {
        Some((r0, c0, side)) => Array2::from_shape_fn((rows, cols), |(r, c)| {
            // Output pixel centres mapped into the crop window.
            let y = r0 + (r as f64 + 0.5) * side / rows as f64 - 0.5;
            let x = c0 + (c as f64 + 0.5) * side / cols as f64 - 0.5;
            bilinear(raster, y, x)
        }),
        None => raster.clone(),
    };
    out.mapv_inplace(|v| v * p.brightness);
    let mean = out.mean().unwrap_or(0.0);
    out.mapv_inplace(|v| ((v - mean) * p.contrast + mean).clamp(0.0, 1.0));
    out
}

fn bilinear(img: &Array2<f64>, y: f64, x: f64) -> f64 {
    let (rows, cols) = img.dim();
    let y = y.clamp(0.0, (rows - 1) as f64);
    let x = x.clamp(0.0, (cols - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(rows - 1), (x0 + 1).min(cols - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = img[[y0, x0]] * (1.0 - fx) + img[[y0, x1]] * fx;
    let bottom = img[[y1, x0]] * (1.0 - fx) + img[[y1, x1]] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Augments every raster frame inside a flattened feature vector.
pub fn augment_features<R: Rng>(features: &mut [f64], cfg: &AugmentConfig, rng: &mut R) {
    if !cfg.enabled {
        return;
    }
    for chunk in features.chunks_mut(RASTER_DIM) {
        let img = Array2::from_shape_vec((RASTER_SIDE, RASTER_SIDE), chunk.to_vec())
            .expect("raster frames are square");
        let out = augment(&img, cfg, rng);
        chunk.copy_from_slice(out.as_slice().expect("standard layout"));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Discrete,
    Continuous,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Discrete => "discrete",
            HeadKind::Continuous => "continuous",
        }
    }
}

/// Smallest standard deviation the z-score path will divide by.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormStats {
    pub fn validate(&self) -> Result<(), ObsError> {
        for d in 0..3 {
            let vals = [self.min[d], self.max[d], self.mean[d], self.std[d]];
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(ObsError::Invalid { dim: d, reason: "non-finite value".into() });
            }
            if self.max[d] <= self.min[d] {
                return Err(ObsError::Degenerate { dim: d, min: self.min[d], max: self.max[d] });
            }
            if self.std[d] < STD_FLOOR {
                return Err(ObsError::Invalid { dim: d, reason: format!("std {} below floor", self.std[d]) });
            }
        }
        Ok(())
    }

    /// Maps an action into the head's normalized space: `[min,max] -> [0,1]`
    /// for the discrete head, z-score for the continuous head.
    pub fn normalize(&self, a: &Action, head: HeadKind) -> [f64; 3] {
        let a = a.to_array();
        std::array::from_fn(|d| match head {
            HeadKind::Discrete => (a[d] - self.min[d]) / (self.max[d] - self.min[d]),
            HeadKind::Continuous => (a[d] - self.mean[d]) / self.std[d],
        })
    }

    /// Inverse of [`NormStats::normalize`]; no clamping.
    pub fn denormalize(&self, z: &[f64; 3], head: HeadKind) -> [f64; 3] {
        std::array::from_fn(|d| match head {
            HeadKind::Discrete => z[d] * (self.max[d] - self.min[d]) + self.min[d],
            HeadKind::Continuous => z[d] * self.std[d] + self.mean[d],
        })
    }
}

/// Exact per-dimension min, max, mean and (population) standard deviation.
pub fn compute_stats(actions: &[Action]) -> Result<NormStats, ObsError> {
    if actions.is_empty() {
        return Err(ObsError::EmptyDataset);
    }
    let n = actions.len() as f64;
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    let mut sum = [0.0; 3];
    for a in actions {
        for (d, v) in a.to_array().into_iter().enumerate() {
            min[d] = min[d].min(v);
            max[d] = max[d].max(v);
            sum[d] += v;
        }
    }
    let mean = sum.map(|s| s / n);
    let mut var = [0.0; 3];
    for a in actions {
        for (d, v) in a.to_array().into_iter().enumerate() {
            var[d] += (v - mean[d]).powi(2);
        }
    }
    let std = std::array::from_fn(|d| (var[d] / n).sqrt().max(STD_FLOOR));
    let stats = NormStats { min, max, mean, std };
    stats.validate()?;
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn act(dx: f64, dy: f64, g: f64) -> Action {
        Action::new(dx, dy, g).unwrap()
    }

    #[test]
    fn augmentation_disabled_is_identity() {
        let img = Array2::from_shape_fn((32, 32), |(r, c)| ((r * 32 + c) % 7) as f64 / 7.0);
        let cfg = AugmentConfig { enabled: false, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&img, &cfg, &mut rng), img);
    }

    #[test]
    fn brightness_scales_uniform_raster() {
        let img = Array2::from_elem((32, 32), 0.5);
        let p = AugmentParams { crop: None, brightness: 1.2, contrast: 1.0 };
        let out = apply_augment(&img, &p);
        assert!(out.iter().all(|v| (v - 0.6).abs() < 1e-12));
    }

    #[test]
    fn full_window_crop_is_identity() {
        let img = Array2::from_shape_fn((32, 32), |(r, c)| ((r + 3 * c) % 11) as f64 / 11.0);
        let p = AugmentParams { crop: Some((0.0, 0.0, 32.0)), brightness: 1.0, contrast: 1.0 };
        let out = apply_augment(&img, &p);
        for (a, b) in out.iter().zip(img.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn augmented_output_in_unit_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let cfg = AugmentConfig::default();
        for _ in 0..50 {
            let img = Array2::from_shape_fn((32, 32), |_| rng.random::<f64>());
            let out = augment(&img, &cfg, &mut rng);
            assert_eq!(out.dim(), (32, 32));
            assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn history_stack_is_exact() {
        let mut enc = ObservationEncoder::new(ObsMode::StateVector, 3);
        let frame = |t: usize| vec![t as f64; STATE_DIM];
        let o1 = enc.push_frame(frame(1));
        assert_eq!(o1.history.len(), 1);
        let f = o1.features();
        assert_eq!(f.len(), 3 * STATE_DIM);
        assert!(f[..2 * STATE_DIM].iter().all(|&v| v == 0.0));
        assert!(f[2 * STATE_DIM..].iter().all(|&v| v == 1.0));
        enc.push_frame(frame(2));
        enc.push_frame(frame(3));
        let o4 = enc.push_frame(frame(4));
        assert_eq!(o4.history, vec![frame(2), frame(3), frame(4)]);
    }

    #[test]
    fn instruction_is_one_hot() {
        for t in TaskId::ALL {
            let i = Instruction::new(t);
            assert_eq!(i.one_hot.iter().sum::<f64>(), 1.0);
            assert_eq!(i.one_hot[t.index()], 1.0);
            assert_eq!(i.name, t.name());
        }
    }

    #[test]
    fn stats_of_two_actions() {
        let s = compute_stats(&[act(-1.0, 0.0, -1.0), act(1.0, 0.5, 1.0)]).unwrap();
        assert_eq!(s.mean[0], 0.0);
        assert_eq!(s.min[0], -1.0);
        assert_eq!(s.max[0], 1.0);
        assert_eq!(s.std[0], 1.0);
    }

    #[test]
    fn single_action_is_degenerate() {
        let err = compute_stats(&[act(0.3, 0.2, 1.0)]).unwrap_err();
        assert!(matches!(err, ObsError::Degenerate { dim: 0, .. }));
        assert!(err.to_string().contains("degenerate"));
        assert_eq!(compute_stats(&[]).unwrap_err(), ObsError::EmptyDataset);
    }

    #[test]
    fn normalization_endpoints() {
        let s = compute_stats(&[act(-1.0, -0.5, -1.0), act(1.0, 0.5, 1.0), act(0.2, 0.1, 1.0)]).unwrap();
        let lo = s.normalize(&act(-1.0, -0.5, -1.0), HeadKind::Discrete);
        let hi = s.normalize(&act(1.0, 0.5, 1.0), HeadKind::Discrete);
        assert_eq!(lo, [0.0; 3]);
        assert_eq!(hi, [1.0; 3]);
        let mean = Action::from_array(s.mean).unwrap();
        assert!(s.normalize(&mean, HeadKind::Continuous).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn normalization_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sample: Vec<Action> = (0..200)
            .map(|_| act(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let s = compute_stats(&sample).unwrap();
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let a = act(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            for head in [HeadKind::Discrete, HeadKind::Continuous] {
                let back = s.denormalize(&s.normalize(&a, head), head);
                for (b, x) in back.iter().zip(a.to_array()) {
                    worst = worst.max((b - x).abs());
                }
            }
        }
        assert!(worst < 1e-9, "round-trip error {worst}");
    }

    #[test]
    fn stats_are_reproducible() {
        let sample = vec![act(-0.3, 0.7, 1.0), act(0.9, -0.2, -1.0), act(0.1, 0.1, 1.0)];
        assert_eq!(compute_stats(&sample).unwrap(), compute_stats(&sample).unwrap());
    }
}
