//! Trainable manipulation policy: a tanh MLP over the instruction one-hot
//! concatenated with observation features, ending in either a regression
//! head or one categorical head per action dimension.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, TaskId, A_MAX, A_MIN};
use crate::obs::{HeadKind, Instruction, NormStats, ObsMode, Observation};

pub const DEFAULT_VOCAB_SIZE: usize = 256;
pub const DEFAULT_HIDDEN: [usize; 2] = [128, 128];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("shape mismatch at layer {layer}: expected {expected}, found {found}")]
    ShapeMismatch { layer: usize, expected: String, found: String },
    #[error("non-finite parameter in layer {layer}")]
    NonFinite { layer: usize },
    #[error("token {token} outside vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: usize, vocab_size: usize },
    #[error("invalid action bounds: a_max {a_max} must exceed a_min {a_min}")]
    InvalidBounds { a_min: f64, a_max: f64 },
    #[error("vocabulary size must be at least 2, got {0}")]
    InvalidVocab(usize),
    #[error("observation mode {found:?} does not match architecture mode {expected:?}")]
    ModeMismatch { expected: ObsMode, found: ObsMode },
}

/// Observation features enter the first layer as `(x - 0.5) * scale`.
pub const DEFAULT_INPUT_SCALE: f64 = 10.0;

/// Architecture descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub obs_mode: ObsMode,
    /// History length `k`.
    pub history: usize,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub head: HeadKind,
    /// Only meaningful for the discrete head.
    pub vocab_size: usize,
    /// Observation features (not the task one-hot) are centered on 0.5 and
    /// multiplied by this before the first layer.
    pub input_scale: f64,
}

impl Architecture {
    pub fn new(obs_mode: ObsMode, history: usize, hidden: Vec<usize>, head: HeadKind, vocab_size: usize) -> Self {
        let input_dim = TaskId::ALL.len() + history * obs_mode.frame_dim();
        Self { obs_mode, history, input_dim, hidden, head, vocab_size, input_scale: DEFAULT_INPUT_SCALE }
    }

    pub fn with_input_scale(mut self, scale: f64) -> Self {
        self.input_scale = scale;
        self
    }

    /// Applies the fixed feature encoding to raw `[one-hot | features]` rows.
    pub fn encode_inputs(&self, inputs: &Array2<f64>) -> Array2<f64> {
        let n_tasks = TaskId::ALL.len();
        let mut x = inputs.clone();
        x.slice_mut(s![.., n_tasks..]).mapv_inplace(|v| (v - 0.5) * self.input_scale);
        x
    }

    pub fn output_dim(&self) -> usize {
        match self.head {
            HeadKind::Continuous => Action::DIM,
            HeadKind::Discrete => Action::DIM * self.vocab_size,
        }
    }

    /// `(fan_in, fan_out)` per layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut sizes = vec![self.input_dim];
        sizes.extend(&self.hidden);
        sizes.push(self.output_dim());
        sizes.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Dense layer; `weight` is `fan_out x fan_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weight: Array2::zeros((fan_out, fan_in)), bias: Array1::zeros(fan_out) }
    }
}

/// Output of a single forward pass.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadOutput {
    /// Normalized action (z-score space).
    Continuous([f64; 3]),
    /// `vocab_size` logits per action dimension.
    Discrete(Vec<Vec<f64>>),
}

/// Activations kept for backpropagation. `activations[0]` is the input,
/// the last entry is the (linear) output.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("at least one layer")
    }
}

/// Policy parameters. Treated as an immutable snapshot; training returns a
/// new value.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub arch: Architecture,
    pub layers: Vec<Layer>,
}

impl PolicyParams {
    pub fn zeros(arch: Architecture) -> Self {
        let layers = arch.layer_dims().into_iter().map(|(i, o)| Layer::zeros(i, o)).collect();
        Self { arch, layers }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng>(arch: Architecture, rng: &mut R) -> Self {
        let mut p = Self::zeros(arch);
        for layer in &mut p.layers {
            let (fan_out, fan_in) = layer.weight.dim();
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            layer.weight.mapv_inplace(|_| rng.random_range(-limit..limit));
        }
        p
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let dims = self.arch.layer_dims();
        if dims.len() != self.layers.len() {
            return Err(PolicyError::ShapeMismatch {
                layer: self.layers.len().min(dims.len()),
                expected: format!("{} layers", dims.len()),
                found: format!("{} layers", self.layers.len()),
            });
        }
        for (i, ((fan_in, fan_out), layer)) in dims.iter().zip(&self.layers).enumerate() {
            if layer.weight.dim() != (*fan_out, *fan_in) || layer.bias.len() != *fan_out {
                return Err(PolicyError::ShapeMismatch {
                    layer: i,
                    expected: format!("weight {fan_out}x{fan_in}, bias {fan_out}"),
                    found: format!("weight {:?}, bias {}", layer.weight.dim(), layer.bias.len()),
                });
            }
            if layer.weight.iter().chain(layer.bias.iter()).any(|v| !v.is_finite()) {
                return Err(PolicyError::NonFinite { layer: i });
            }
        }
        Ok(())
    }

    /// Parameters in declared order: per layer, row-major weight then bias.
    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn from_flat(arch: Architecture, flat: &[f64]) -> Result<Self, PolicyError> {
        let mut p = Self::zeros(arch);
        let n = p.num_params();
        if flat.len() != n {
            return Err(PolicyError::ShapeMismatch {
                layer: 0,
                expected: format!("{n} parameters"),
                found: format!("{} parameters", flat.len()),
            });
        }
        let mut it = flat.iter().copied();
        for layer in &mut p.layers {
            layer.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
            layer.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        Ok(p)
    }

    /// Batched forward pass over rows of `inputs`.
    pub fn forward_batch(&self, inputs: &Array2<f64>) -> Result<ForwardCache, PolicyError> {
        if inputs.ncols() != self.arch.input_dim {
            return Err(PolicyError::ShapeMismatch {
                layer: 0,
                expected: format!("input dim {}", self.arch.input_dim),
                found: format!("input dim {}", inputs.ncols()),
            });
        }
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(self.arch.encode_inputs(inputs));
        for (i, layer) in self.layers.iter().enumerate() {
            let prev = activations.last().unwrap();
            if prev.ncols() != layer.weight.ncols() {
                return Err(PolicyError::ShapeMismatch {
                    layer: i,
                    expected: format!("fan-in {}", layer.weight.ncols()),
                    found: format!("fan-in {}", prev.ncols()),
                });
            }
            if layer.bias.len() != layer.weight.nrows() {
                return Err(PolicyError::ShapeMismatch {
                    layer: i,
                    expected: format!("bias length {}", layer.weight.nrows()),
                    found: format!("bias length {}", layer.bias.len()),
                });
            }
            let mut z = prev.dot(&layer.weight.t());
            z += &layer.bias;
            if i < last {
                z.mapv_inplace(f64::tanh);
            }
            activations.push(z);
        }
        Ok(ForwardCache { activations })
    }

    /// Input vector for one `(instruction, observation)` pair.
    pub fn input_vector(&self, instruction: &Instruction, obs: &Observation) -> Result<Vec<f64>, PolicyError> {
        if obs.mode != self.arch.obs_mode {
            return Err(PolicyError::ModeMismatch { expected: self.arch.obs_mode, found: obs.mode });
        }
        let mut x = instruction.one_hot.clone();
        x.extend(obs.features());
        Ok(x)
    }

    pub fn forward_raw(&self, input: &[f64]) -> Result<Vec<f64>, PolicyError> {
        let x = Array2::from_shape_vec((1, input.len()), input.to_vec()).expect("row vector");
        let cache = self.forward_batch(&x)?;
        Ok(cache.output().row(0).to_vec())
    }

    pub fn forward(&self, instruction: &Instruction, obs: &Observation) -> Result<HeadOutput, PolicyError> {
        let out = self.forward_raw(&self.input_vector(instruction, obs)?)?;
        Ok(self.head_output(&out))
    }

    fn head_output(&self, out: &[f64]) -> HeadOutput {
        match self.arch.head {
            HeadKind::Continuous => HeadOutput::Continuous([out[0], out[1], out[2]]),
            HeadKind::Discrete => HeadOutput::Discrete(
                out.chunks(self.arch.vocab_size).map(<[f64]>::to_vec).collect(),
            ),
        }
    }

    /// Greedy action for a prepared input vector.
    pub fn act_input(&self, input: &[f64], stats: &NormStats) -> Result<Action, PolicyError> {
        let out = self.forward_raw(input)?;
        decode_action(&self.head_output(&out), self.arch.vocab_size, stats)
    }

    pub fn act(&self, instruction: &Instruction, obs: &Observation, stats: &NormStats) -> Result<Action, PolicyError> {
        self.act_input(&self.input_vector(instruction, obs)?, stats)
    }
}

pub(crate) fn flatten_layers(layers: &[Layer]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend(l.weight.iter());
        out.extend(l.bias.iter());
    }
    out
}

/// Turns head output into a bounded action: argmax plus detokenization over
/// the dataset bounds for the discrete head, denormalization for the
/// continuous head.
pub fn decode_action(out: &HeadOutput, vocab_size: usize, stats: &NormStats) -> Result<Action, PolicyError> {
    let a: [f64; 3] = match out {
        HeadOutput::Continuous(z) => stats.denormalize(z, HeadKind::Continuous),
        HeadOutput::Discrete(logits) => {
            let mut a = [0.0; 3];
            for (d, row) in logits.iter().enumerate() {
                let token = argmax(row);
                a[d] = detokenize(token, vocab_size, stats.min[d], stats.max[d])?;
            }
            a
        }
    };
    let clamped = a.map(|v| if v.is_finite() { v.clamp(A_MIN, A_MAX) } else { 0.0 });
    Ok(Action::from_array(clamped).expect("finite by construction"))
}

/// Index of the first maximal entry.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

fn check_bounds(vocab_size: usize, a_min: f64, a_max: f64) -> Result<(), PolicyError> {
    if vocab_size < 2 {
        return Err(PolicyError::InvalidVocab(vocab_size));
    }
    if !(a_max > a_min) {
        return Err(PolicyError::InvalidBounds { a_min, a_max });
    }
    Ok(())
}

/// Maps a token index back onto the continuous interval:
/// `token / (vocab_size - 1) * (a_max - a_min) + a_min`.
pub fn detokenize(token: usize, vocab_size: usize, a_min: f64, a_max: f64) -> Result<f64, PolicyError> {
    check_bounds(vocab_size, a_min, a_max)?;
    if token >= vocab_size {
        return Err(PolicyError::TokenOutOfRange { token, vocab_size });
    }
    Ok(token as f64 / (vocab_size - 1) as f64 * (a_max - a_min) + a_min)
}

/// Nearest-bin token for a continuous value.
#[derive(Debug)]
pub struct Tokenizer {
    pub vocab_size: usize,
    pub a_min: f64,
    pub a_max: f64,
    clamped: AtomicU64,
}

impl Tokenizer {
    pub fn new(vocab_size: usize, a_min: f64, a_max: f64) -> Result<Self, PolicyError> {
        check_bounds(vocab_size, a_min, a_max)?;
        Ok(Self { vocab_size, a_min, a_max, clamped: AtomicU64::new(0) })
    }

    /// Values outside `[a_min, a_max]` are clamped and counted.
    pub fn tokenize(&self, a: f64) -> usize {
        let mut v = a;
        if !(self.a_min..=self.a_max).contains(&a) {
            self.clamped.fetch_add(1, Ordering::Relaxed);
            v = if a.is_nan() { self.a_min } else { a.clamp(self.a_min, self.a_max) };
        }
        let scaled = (v - self.a_min) / (self.a_max - self.a_min) * (self.vocab_size - 1) as f64;
        (scaled.round() as usize).min(self.vocab_size - 1)
    }

    pub fn detokenize(&self, token: usize) -> Result<f64, PolicyError> {
        detokenize(token, self.vocab_size, self.a_min, self.a_max)
    }

    /// Number of out-of-range inputs seen so far.
    pub fn clamp_warnings(&self) -> u64 {
        self.clamped.load(Ordering::Relaxed)
    }
}

pub fn tokenize(a: f64, vocab_size: usize, a_min: f64, a_max: f64) -> Result<usize, PolicyError> {
    Ok(Tokenizer::new(vocab_size, a_min, a_max)?.tokenize(a))
}

/// Splits a batched discrete output into the logits block for one action
/// dimension.
pub(crate) fn logits_block(out: &Array2<f64>, dim: usize, vocab: usize) -> ndarray::ArrayView2<'_, f64> {
    out.slice(s![.., dim * vocab..(dim + 1) * vocab])
}

/// Row-wise log-softmax.
pub(crate) fn log_softmax_rows(logits: ndarray::ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::obs::{ObservationEncoder, STATE_DIM};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_stats() -> NormStats {
        NormStats { min: [-1.0; 3], max: [1.0; 3], mean: [0.1, -0.2, 0.3], std: [0.5, 0.6, 0.7] }
    }

    fn obs(values: f64) -> Observation {
        let mut enc = ObservationEncoder::new(ObsMode::StateVector, 1);
        enc.push_frame(vec![values; STATE_DIM])
    }

    #[test]
    fn detokenize_endpoints_and_interior() {
        assert_eq!(detokenize(0, 256, -1.0, 1.0).unwrap(), -1.0);
        assert_eq!(detokenize(255, 256, -1.0, 1.0).unwrap(), 1.0);
        assert!((detokenize(51, 256, -1.0, 1.0).unwrap() - (-0.6)).abs() < 1e-15);
        assert_eq!(
            detokenize(256, 256, -1.0, 1.0),
            Err(PolicyError::TokenOutOfRange { token: 256, vocab_size: 256 })
        );
        assert!(detokenize(3, 256, 1.0, 1.0).is_err());
    }

    #[test]
    fn tokenize_endpoints_and_bin_round_trip() {
        let tok = Tokenizer::new(256, -1.0, 1.0).unwrap();
        assert_eq!(tok.tokenize(-1.0), 0);
        assert_eq!(tok.tokenize(1.0), 255);
        for t in 0..256 {
            assert_eq!(tok.tokenize(tok.detokenize(t).unwrap()), t);
        }
        assert_eq!(tok.clamp_warnings(), 0);
    }

    #[test]
    fn tokenize_clamps_and_counts() {
        let tok = Tokenizer::new(256, -1.0, 1.0).unwrap();
        assert_eq!(tok.tokenize(1.7), 255);
        assert_eq!(tok.tokenize(-3.0), 0);
        assert_eq!(tok.clamp_warnings(), 2);
    }

    #[test]
    fn detokenize_is_monotone() {
        let vals: Vec<f64> = (0..256).map(|t| detokenize(t, 256, -1.0, 1.0).unwrap()).collect();
        assert!(vals.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn zero_params_give_zero_normalized_action() {
        let arch = Architecture::new(ObsMode::StateVector, 1, vec![8, 8], HeadKind::Continuous, 256);
        let p = PolicyParams::zeros(arch);
        let out = p.forward(&Instruction::new(TaskId::Reach), &obs(0.3)).unwrap();
        assert_eq!(out, HeadOutput::Continuous([0.0; 3]));
        // Denormalizing zero yields the dataset mean.
        let stats = unit_stats();
        let a = p.act(&Instruction::new(TaskId::Reach), &obs(0.3), &stats).unwrap();
        assert_eq!(a.to_array(), stats.mean);
    }

    #[test]
    fn forward_is_deterministic_and_checks_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let arch = Architecture::new(ObsMode::StateVector, 1, vec![16], HeadKind::Discrete, 8);
        let p = PolicyParams::init(arch, &mut rng);
        let i = Instruction::new(TaskId::Push);
        assert_eq!(p.forward(&i, &obs(0.2)).unwrap(), p.forward(&i, &obs(0.2)).unwrap());
        match p.forward(&i, &obs(0.2)).unwrap() {
            HeadOutput::Discrete(l) => {
                assert_eq!(l.len(), 3);
                assert!(l.iter().all(|r| r.len() == 8));
            }
            other => panic!("unexpected {other:?}"),
        }
        let mut wrong = ObservationEncoder::new(ObsMode::StateVector, 2);
        let o2 = wrong.push_frame(vec![0.0; STATE_DIM]);
        let err = p.forward(&i, &o2).unwrap_err();
        assert!(matches!(err, PolicyError::ShapeMismatch { layer: 0, .. }), "{err}");
        assert!(err.to_string().contains("layer 0"));
    }

    #[test]
    fn corrupted_layer_is_named() {
        let arch = Architecture::new(ObsMode::StateVector, 1, vec![4, 4], HeadKind::Continuous, 256);
        let mut p = PolicyParams::zeros(arch);
        p.layers[1].weight = Array2::zeros((3, 4));
        assert!(matches!(p.validate(), Err(PolicyError::ShapeMismatch { layer: 1, .. })));
        let x = Array2::zeros((1, p.arch.input_dim));
        assert!(matches!(p.forward_batch(&x), Err(PolicyError::ShapeMismatch { layer: 1, .. })));
    }

    #[test]
    fn peaked_logits_decode_to_upper_bound() {
        let mut logits = vec![vec![0.0; 256]; 3];
        for row in &mut logits {
            row[255] = 10.0;
        }
        let a = decode_action(&HeadOutput::Discrete(logits), 256, &unit_stats()).unwrap();
        assert_eq!(a.to_array(), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn random_policy_outputs_are_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for head in [HeadKind::Continuous, HeadKind::Discrete] {
            let arch = Architecture::new(ObsMode::StateVector, 1, vec![32, 32], head, 16);
            let p = PolicyParams::init(arch, &mut rng);
            for _ in 0..1000 {
                let x: Vec<f64> = (0..p.arch.input_dim).map(|_| rng.random_range(-5.0..5.0)).collect();
                let out = p.forward_raw(&x).unwrap();
                assert!(out.iter().all(|v| v.is_finite()));
                let a = p.act_input(&x, &unit_stats()).unwrap();
                assert!(a.is_valid());
            }
        }
    }

    #[test]
    fn flat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let arch = Architecture::new(ObsMode::StateVector, 2, vec![5, 3], HeadKind::Discrete, 4);
        let p = PolicyParams::init(arch.clone(), &mut rng);
        assert_eq!(PolicyParams::from_flat(arch, &p.flatten()).unwrap(), p);
    }

    proptest! {
        #[test]
        fn detokenize_tokenize_within_half_bin(a in -1.0f64..=1.0) {
            let tok = Tokenizer::new(256, -1.0, 1.0).unwrap();
            let back = tok.detokenize(tok.tokenize(a)).unwrap();
            prop_assert!((back - a).abs() <= 2.0 / (2.0 * 255.0) + 1e-15);
        }

        #[test]
        fn argmax_invariant_under_logit_shift(shift in -50.0f64..50.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits: Vec<Vec<f64>> = (0..3).map(|_| (0..16).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
            let mut shifted = logits.clone();
            shifted[1].iter_mut().for_each(|v| *v += shift);
            let stats = unit_stats();
            prop_assert_eq!(
                decode_action(&HeadOutput::Discrete(logits), 16, &stats).unwrap(),
                decode_action(&HeadOutput::Discrete(shifted), 16, &stats).unwrap()
            );
        }
    }
}
