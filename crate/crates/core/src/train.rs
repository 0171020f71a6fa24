//! Supervised learning on demonstration samples: loss, backpropagated
//! gradient, minibatch SGD with momentum and the binary checkpoint format.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arbiter::Actor;
use crate::env::{Action, TaskId};
use crate::obs::{augment_features, AugmentConfig, HeadKind, NormStats, ObsMode};
use crate::policy::{flatten_layers, log_softmax_rows, logits_block, Architecture, Layer, PolicyError, PolicyParams, Tokenizer};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset does not match the policy: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// One supervised example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub task: TaskId,
    /// Flattened observation features (history included).
    pub obs: Vec<f64>,
    pub action: Action,
    pub actor: Actor,
    pub episode_id: u64,
    pub step: u32,
}

impl Sample {
    fn order_key(&self) -> (u64, u32, usize, u8) {
        (self.episode_id, self.step, self.task.index(), self.actor as u8)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetHeader {
    obs_mode: ObsMode,
    history: usize,
    samples: usize,
}

/// Collection of samples sharing one observation encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub obs_mode: ObsMode,
    pub history: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(obs_mode: ObsMode, history: usize) -> Self {
        Self { obs_mode, history, samples: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn actions(&self) -> Vec<Action> {
        self.samples.iter().map(|s| s.action).collect()
    }

    pub fn extend(&mut self, samples: impl IntoIterator<Item = Sample>) {
        self.samples.extend(samples);
    }

    pub fn filter_task(&self, task: TaskId) -> Dataset {
        Dataset {
            obs_mode: self.obs_mode,
            history: self.history,
            samples: self.samples.iter().filter(|s| s.task == task).cloned().collect(),
        }
    }

    /// Sample indices in canonical `(episode, step)` order, independent of
    /// storage order.
    fn canonical_order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.samples.len()).collect();
        idx.sort_by_key(|&i| self.samples[i].order_key());
        idx
    }

    fn check_arch(&self, arch: &Architecture) -> Result<(), TrainError> {
        if self.obs_mode != arch.obs_mode || self.history != arch.history {
            return Err(TrainError::Incompatible(format!(
                "dataset encodes {:?} x{}, policy expects {:?} x{}",
                self.obs_mode, self.history, arch.obs_mode, arch.history
            )));
        }
        let want = arch.input_dim - TaskId::ALL.len();
        if let Some(bad) = self.samples.iter().find(|s| s.obs.len() != want) {
            return Err(TrainError::Incompatible(format!(
                "sample (episode {}, step {}) has {} features, expected {want}",
                bad.episode_id,
                bad.step,
                bad.obs.len()
            )));
        }
        Ok(())
    }

    /// JSON lines: a header object followed by one sample per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), TrainError> {
        let header = DatasetHeader { obs_mode: self.obs_mode, history: self.history, samples: self.samples.len() };
        writeln!(w, "{}", serde_json::to_string(&header).expect("serializable"))?;
        for s in &self.samples {
            writeln!(w, "{}", serde_json::to_string(s).expect("serializable"))?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, TrainError> {
        let mut lines = r.lines();
        let parse_err = |line: usize, e: serde_json::Error| TrainError::Parse { line, message: e.to_string() };
        let first = lines.next().ok_or(TrainError::Parse { line: 1, message: "missing header".into() })??;
        let header: DatasetHeader = serde_json::from_str(&first).map_err(|e| parse_err(1, e))?;
        let mut samples = Vec::with_capacity(header.samples);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            samples.push(serde_json::from_str(&line).map_err(|e| parse_err(i + 2, e))?);
        }
        if samples.len() != header.samples {
            return Err(TrainError::Parse {
                line: samples.len() + 1,
                message: format!("header announces {} samples, found {}", header.samples, samples.len()),
            });
        }
        Ok(Self { obs_mode: header.obs_mode, history: header.history, samples })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(f)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::read_jsonl(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Supervision targets in the head's own space.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// z-scored actions, one row per example.
    Continuous(Array2<f64>),
    /// Token index per action dimension.
    Discrete(Vec<[usize; 3]>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub targets: Targets,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Builds a batch; raster features are augmented when `augment` is set.
    pub fn from_samples(
        samples: &[&Sample],
        arch: &Architecture,
        stats: &NormStats,
        mut augment: Option<(&AugmentConfig, &mut ChaCha8Rng)>,
    ) -> Result<Self, PolicyError> {
        let n_tasks = TaskId::ALL.len();
        let mut inputs = Array2::zeros((samples.len(), arch.input_dim));
        for (r, s) in samples.iter().enumerate() {
            if s.obs.len() + n_tasks != arch.input_dim {
                return Err(PolicyError::ShapeMismatch {
                    layer: 0,
                    expected: format!("input dim {}", arch.input_dim),
                    found: format!("input dim {}", s.obs.len() + n_tasks),
                });
            }
            let mut row = inputs.row_mut(r);
            row[s.task.index()] = 1.0;
            let mut feats = s.obs.clone();
            if let (ObsMode::Raster, Some((cfg, rng))) = (arch.obs_mode, augment.as_mut()) {
                augment_features(&mut feats, cfg, *rng);
            }
            for (j, v) in feats.into_iter().enumerate() {
                row[n_tasks + j] = v;
            }
        }
        let targets = match arch.head {
            HeadKind::Continuous => {
                let mut t = Array2::zeros((samples.len(), 3));
                for (r, s) in samples.iter().enumerate() {
                    let z = stats.normalize(&s.action, HeadKind::Continuous);
                    for d in 0..3 {
                        t[[r, d]] = z[d];
                    }
                }
                Targets::Continuous(t)
            }
            HeadKind::Discrete => {
                let toks: Vec<Tokenizer> = (0..3)
                    .map(|d| Tokenizer::new(arch.vocab_size, stats.min[d], stats.max[d]))
                    .collect::<Result<_, _>>()?;
                Targets::Discrete(
                    samples
                        .iter()
                        .map(|s| {
                            let a = s.action.to_array();
                            [toks[0].tokenize(a[0]), toks[1].tokenize(a[1]), toks[2].tokenize(a[2])]
                        })
                        .collect(),
                )
            }
        };
        Ok(Self { inputs, targets })
    }
}

/// Gradient with the same layer shapes as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub layers: Vec<Layer>,
}

impl Gradient {
    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }
}

/// Loss value and gradient with respect to the linear output.
fn output_loss(out: &Array2<f64>, targets: &Targets, vocab: usize) -> Result<(f64, Array2<f64>), PolicyError> {
    let b = out.nrows();
    match targets {
        Targets::Continuous(t) => {
            if t.dim() != out.dim() {
                return Err(PolicyError::ShapeMismatch {
                    layer: 0,
                    expected: format!("targets {:?}", out.dim()),
                    found: format!("targets {:?}", t.dim()),
                });
            }
            let diff = out - t;
            let n = diff.len() as f64;
            let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
            Ok((loss, diff * (2.0 / n)))
        }
        Targets::Discrete(tokens) => {
            if tokens.len() != b {
                return Err(PolicyError::ShapeMismatch {
                    layer: 0,
                    expected: format!("{b} target rows"),
                    found: format!("{} target rows", tokens.len()),
                });
            }
            let scale = 1.0 / (3 * b) as f64;
            let mut d_out = Array2::zeros(out.dim());
            let mut loss = 0.0;
            for dim in 0..3 {
                let logp = log_softmax_rows(logits_block(out, dim, vocab));
                for (r, tok) in tokens.iter().enumerate() {
                    let t = tok[dim];
                    if t >= vocab {
                        return Err(PolicyError::TokenOutOfRange { token: t, vocab_size: vocab });
                    }
                    loss -= logp[[r, t]];
                    for j in 0..vocab {
                        let p = logp[[r, j]].exp();
                        let y = if j == t { 1.0 } else { 0.0 };
                        d_out[[r, dim * vocab + j]] = (p - y) * scale;
                    }
                }
            }
            Ok((loss * scale, d_out))
        }
    }
}

/// Mean squared error (continuous head) or mean per-dimension cross-entropy
/// (discrete head).
pub fn loss(params: &PolicyParams, batch: &Batch) -> Result<f64, PolicyError> {
    let cache = params.forward_batch(&batch.inputs)?;
    Ok(output_loss(cache.output(), &batch.targets, params.arch.vocab_size)?.0)
}

pub fn grad(params: &PolicyParams, batch: &Batch) -> Result<Gradient, PolicyError> {
    Ok(loss_and_grad(params, batch)?.1)
}

/// Loss plus its analytic gradient by backpropagation.
pub fn loss_and_grad(params: &PolicyParams, batch: &Batch) -> Result<(f64, Gradient), PolicyError> {
    let cache = params.forward_batch(&batch.inputs)?;
    let (value, mut delta) = output_loss(cache.output(), &batch.targets, params.arch.vocab_size)?;
    let n_layers = params.layers.len();
    let mut grads: Vec<Layer> = Vec::with_capacity(n_layers);
    for l in (0..n_layers).rev() {
        let input = &cache.activations[l];
        let weight = delta.t().dot(input);
        let bias = delta.sum_axis(Axis(0));
        if l > 0 {
            let mut back = delta.dot(&params.layers[l].weight);
            // tanh'(z) = 1 - tanh(z)^2, and activations hold tanh(z).
            back.zip_mut_with(input, |g, &a| *g *= 1.0 - a * a);
            delta = back;
        }
        grads.push(Layer { weight, bias });
    }
    grads.reverse();
    Ok((value, Gradient { layers: grads }))
}

/// Minibatch SGD settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 5000, batch_size: 64, learning_rate: 3e-2, momentum: 0.9, augment: true, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning_rate {} must be finite and non-negative", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub params: PolicyParams,
    /// Loss on a fixed, unaugmented probe batch before and after training.
    pub initial_probe_loss: f64,
    pub final_probe_loss: f64,
}

/// Trains on a single dataset.
pub fn fit(params: &PolicyParams, dataset: &Dataset, stats: &NormStats, cfg: &TrainConfig) -> Result<FitReport, TrainError> {
    fit_mixture(params, &[(dataset, 1.0)], stats, cfg)
}

/// Trains on a weighted mixture of datasets: each minibatch draws
/// `share * batch_size` examples (with replacement) from each source.
///
/// Sample indices come from the seeded generator over each dataset's
/// canonical order, so storage order does not affect the result.
pub fn fit_mixture(
    params: &PolicyParams,
    sources: &[(&Dataset, f64)],
    stats: &NormStats,
    cfg: &TrainConfig,
) -> Result<FitReport, TrainError> {
    cfg.validate()?;
    params.validate()?;
    let sources: Vec<_> = sources.iter().filter(|(d, w)| !d.is_empty() && *w > 0.0).collect();
    if sources.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    for (d, _) in &sources {
        d.check_arch(&params.arch)?;
    }
    let orders: Vec<Vec<usize>> = sources.iter().map(|(d, _)| d.canonical_order()).collect();
    let counts = split_batch(cfg.batch_size, &sources.iter().map(|(_, w)| *w).collect::<Vec<_>>());

    let probe_data = sources[0].0;
    let probe: Vec<&Sample> = orders[0].iter().take(256).map(|&i| &probe_data.samples[i]).collect();
    let probe_batch = Batch::from_samples(&probe, &params.arch, stats, None)?;
    let initial_probe_loss = loss(params, &probe_batch)?;

    if cfg.steps == 0 {
        return Ok(FitReport { params: params.clone(), initial_probe_loss, final_probe_loss: initial_probe_loss });
    }

    let aug_cfg = AugmentConfig { enabled: cfg.augment, ..AugmentConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_A06E_0000_0001);
    let mut current = params.clone();
    let mut velocity: Vec<Layer> = current
        .layers
        .iter()
        .map(|l| Layer { weight: Array2::zeros(l.weight.dim()), bias: Array1::zeros(l.bias.len()) })
        .collect();

    for step in 0..cfg.steps {
        let mut picked: Vec<&Sample> = Vec::with_capacity(cfg.batch_size);
        for (((data, _), order), &count) in sources.iter().zip(&orders).zip(&counts) {
            for _ in 0..count {
                let i = order[rng.random_range(0..order.len())];
                picked.push(&data.samples[i]);
            }
        }
        let aug = if cfg.augment { Some((&aug_cfg, &mut aug_rng)) } else { None };
        let batch = Batch::from_samples(&picked, &current.arch, stats, aug)?;
        let (value, g) = loss_and_grad(&current, &batch)?;
        if !value.is_finite() {
            return Err(TrainError::Divergence { step, loss: value });
        }
        for ((layer, vel), gl) in current.layers.iter_mut().zip(&mut velocity).zip(&g.layers) {
            vel.weight.zip_mut_with(&gl.weight, |v, &gw| *v = cfg.momentum * *v + gw);
            vel.bias.zip_mut_with(&gl.bias, |v, &gb| *v = cfg.momentum * *v + gb);
            layer.weight.scaled_add(-cfg.learning_rate, &vel.weight);
            layer.bias.scaled_add(-cfg.learning_rate, &vel.bias);
        }
    }
    current.validate().map_err(|_| TrainError::Divergence { step: cfg.steps, loss: f64::NAN })?;
    let final_probe_loss = loss(&current, &probe_batch)?;
    Ok(FitReport { params: current, initial_probe_loss, final_probe_loss })
}

/// Splits `batch` examples across sources proportionally to `weights`; the
/// rounding remainder goes to the first sources.
fn split_batch(batch: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let mut counts: Vec<usize> = weights.iter().map(|w| ((w / total) * batch as f64).floor() as usize).collect();
    let mut left = batch - counts.iter().sum::<usize>();
    let n = counts.len();
    let mut i = 0;
    while left > 0 {
        counts[i % n] += 1;
        left -= 1;
        i += 1;
    }
    counts
}

// ---------------------------------------------------------------------------
// Checkpoint file
// ---------------------------------------------------------------------------

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"CLBARMCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("checkpoint truncated: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("checkpoint has {0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("checkpoint metadata: {0}")]
    Metadata(String),
    #[error("checkpoint shape inconsistency: {0}")]
    Shape(String),
    #[error("checkpoint head is {found}, expected {expected}")]
    HeadMismatch { expected: &'static str, found: &'static str },
}

/// Metadata stored as `key=value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub arch: Architecture,
    pub tasks: Vec<TaskId>,
    /// Free-form training provenance (seed, steps, parent checkpoint, ...).
    pub provenance: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: PolicyParams,
    pub stats: NormStats,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(params: PolicyParams, stats: NormStats, provenance: BTreeMap<String, String>) -> Self {
        let meta = CheckpointMeta { arch: params.arch.clone(), tasks: TaskId::ALL.to_vec(), provenance };
        Self { params, stats, meta }
    }

    pub fn require_head(&self, head: HeadKind) -> Result<(), CheckpointError> {
        if self.meta.arch.head != head {
            return Err(CheckpointError::HeadMismatch { expected: head.as_str(), found: self.meta.arch.head.as_str() });
        }
        Ok(())
    }

    fn metadata_text(&self) -> String {
        let a = &self.meta.arch;
        let hidden: Vec<String> = a.hidden.iter().map(|h| h.to_string()).collect();
        let tasks: Vec<&str> = self.meta.tasks.iter().map(|t| t.name()).collect();
        let mut lines = vec![
            format!("head={}", a.head.as_str()),
            format!("vocab_size={}", a.vocab_size),
            format!("obs_mode={}", a.obs_mode.as_str()),
            format!("history={}", a.history),
            format!("input_dim={}", a.input_dim),
            format!("hidden={}", hidden.join(",")),
            format!("input_scale={}", a.input_scale),
            format!("param_count={}", self.params.num_params()),
            format!("tasks={}", tasks.join(";")),
        ];
        for (k, v) in &self.meta.provenance {
            lines.push(format!("provenance.{k}={}", v.replace('\n', " ")));
        }
        let mut text = lines.join("\n");
        text.push('\n');
        text
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = self.metadata_text();
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        let s = &self.stats;
        for v in self.params.flatten().into_iter().chain(s.min).chain(s.max).chain(s.mean).chain(s.std) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let need = |n: usize| {
            if bytes.len() < n {
                Err(CheckpointError::Truncated { needed: n, found: bytes.len() })
            } else {
                Ok(())
            }
        };
        need(8)?;
        if bytes[..8] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        need(14)?;
        let version = u16::from_le_bytes([bytes[8], bytes[9]]);
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
        }
        let meta_len = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        need(14 + meta_len)?;
        let text = std::str::from_utf8(&bytes[14..14 + meta_len])
            .map_err(|e| CheckpointError::Metadata(format!("metadata is not UTF-8: {e}")))?;
        let meta = parse_metadata(text)?;

        let n_params = meta.arch.layer_dims().iter().map(|(i, o)| i * o + o).sum::<usize>();
        let n_values = n_params + 12;
        let body = &bytes[14 + meta_len..];
        need(14 + meta_len + n_values * 8)?;
        if body.len() > n_values * 8 {
            return Err(CheckpointError::TrailingBytes(body.len() - n_values * 8));
        }
        let values: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let params = PolicyParams::from_flat(meta.arch.clone(), &values[..n_params])
            .map_err(|e| CheckpointError::Shape(e.to_string()))?;
        params.validate().map_err(|e| CheckpointError::Shape(e.to_string()))?;
        let tail = &values[n_params..];
        let arr = |o: usize| -> [f64; 3] { [tail[o], tail[o + 1], tail[o + 2]] };
        let stats = NormStats { min: arr(0), max: arr(3), mean: arr(6), std: arr(9) };
        stats.validate().map_err(|e| CheckpointError::Shape(format!("normalization stats: {e}")))?;
        Ok(Self { params, stats, meta })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn parse_metadata(text: &str) -> Result<CheckpointMeta, CheckpointError> {
    let mut kv = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CheckpointError::Metadata(format!("malformed line `{line}`")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| kv.get(k).ok_or_else(|| CheckpointError::Metadata(format!("missing key `{k}`")));
    let num = |k: &str| -> Result<usize, CheckpointError> {
        get(k)?.parse().map_err(|_| CheckpointError::Metadata(format!("key `{k}` is not an integer")))
    };
    let head = match get("head")?.as_str() {
        "discrete" => HeadKind::Discrete,
        "continuous" => HeadKind::Continuous,
        other => return Err(CheckpointError::Metadata(format!("unknown head `{other}`"))),
    };
    let obs_mode = ObsMode::parse(get("obs_mode")?)
        .ok_or_else(|| CheckpointError::Metadata("unknown obs_mode".into()))?;
    let hidden_text = get("hidden")?;
    let hidden = if hidden_text.is_empty() {
        Vec::new()
    } else {
        hidden_text
            .split(',')
            .map(|h| h.parse().map_err(|_| CheckpointError::Metadata(format!("bad hidden size `{h}`"))))
            .collect::<Result<Vec<usize>, _>>()?
    };
    let input_scale: f64 = get("input_scale")?
        .parse()
        .ok()
        .filter(|v: &f64| v.is_finite() && *v > 0.0)
        .ok_or_else(|| CheckpointError::Metadata("input_scale must be a positive number".into()))?;
    let arch = Architecture::new(obs_mode, num("history")?, hidden, head, num("vocab_size")?).with_input_scale(input_scale);
    if arch.input_dim != num("input_dim")? {
        return Err(CheckpointError::Shape(format!(
            "input_dim {} disagrees with obs_mode/history ({})",
            num("input_dim")?,
            arch.input_dim
        )));
    }
    let declared = num("param_count")?;
    let implied = arch.layer_dims().iter().map(|(i, o)| i * o + o).sum::<usize>();
    if declared != implied {
        return Err(CheckpointError::Shape(format!("param_count {declared} disagrees with architecture ({implied})")));
    }
    let tasks = get("tasks")?
        .split(';')
        .map(|n| TaskId::from_name(n).map_err(|e| CheckpointError::Metadata(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let provenance = kv
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("provenance.").map(|k| (k.to_string(), v.clone())))
        .collect();
    Ok(CheckpointMeta { arch, tasks, provenance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::obs::STATE_DIM;

    fn arch(head: HeadKind, vocab: usize) -> Architecture {
        Architecture::new(ObsMode::StateVector, 1, vec![6, 5], head, vocab)
    }

    fn stats() -> NormStats {
        NormStats { min: [-1.0; 3], max: [1.0; 3], mean: [0.0, 0.1, -0.2], std: [0.7, 0.8, 0.9] }
    }

    fn random_dataset(n: usize, rng: &mut ChaCha8Rng) -> Dataset {
        let mut d = Dataset::new(ObsMode::StateVector, 1);
        for i in 0..n {
            d.samples.push(Sample {
                task: TaskId::ALL[i % 10],
                obs: (0..STATE_DIM).map(|_| rng.random::<f64>()).collect(),
                action: Action::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), if i % 2 == 0 { 1.0 } else { -1.0 }).unwrap(),
                actor: Actor::Expert,
                episode_id: (i / 7) as u64,
                step: (i % 7) as u32,
            });
        }
        d
    }

    fn batch_of(d: &Dataset, a: &Architecture) -> Batch {
        let refs: Vec<&Sample> = d.samples.iter().collect();
        Batch::from_samples(&refs, a, &stats(), None).unwrap()
    }

    #[test]
    fn exact_targets_give_zero_loss_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = arch(HeadKind::Continuous, 256);
        let p = PolicyParams::zeros(a.clone());
        let d = random_dataset(12, &mut rng);
        let mut batch = batch_of(&d, &a);
        batch.targets = Targets::Continuous(Array2::zeros((12, 3)));
        assert_eq!(loss(&p, &batch).unwrap(), 0.0);
        assert!(grad(&p, &batch).unwrap().flatten().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = arch(HeadKind::Discrete, 256);
        let p = PolicyParams::zeros(a.clone());
        let d = random_dataset(9, &mut rng);
        let l = loss(&p, &batch_of(&d, &a)).unwrap();
        assert!((l - 256f64.ln()).abs() < 1e-12, "{l}");
    }

    #[test]
    fn loss_is_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for head in [HeadKind::Continuous, HeadKind::Discrete] {
            let a = arch(head, 8);
            for _ in 0..1000 {
                let p = PolicyParams::init(a.clone(), &mut rng);
                let d = random_dataset(4, &mut rng);
                assert!(loss(&p, &batch_of(&d, &a)).unwrap() >= 0.0);
            }
        }
    }

    #[test]
    fn gradient_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = arch(HeadKind::Discrete, 8);
        let p = PolicyParams::init(a.clone(), &mut rng);
        let b = batch_of(&random_dataset(10, &mut rng), &a);
        assert_eq!(grad(&p, &b).unwrap(), grad(&p, &b).unwrap());
    }

    #[test]
    fn zero_steps_and_zero_rate_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = arch(HeadKind::Continuous, 256);
        let p = PolicyParams::init(a, &mut rng);
        let d = random_dataset(30, &mut rng);
        let cfg = TrainConfig { steps: 0, ..Default::default() };
        assert_eq!(fit(&p, &d, &stats(), &cfg).unwrap().params, p);
        let cfg = TrainConfig { steps: 20, learning_rate: 0.0, ..Default::default() };
        assert_eq!(fit(&p, &d, &stats(), &cfg).unwrap().params, p);
    }

    #[test]
    fn fit_is_reproducible_and_order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = arch(HeadKind::Continuous, 256);
        let p = PolicyParams::init(a, &mut rng);
        let d = random_dataset(50, &mut rng);
        let cfg = TrainConfig { steps: 30, batch_size: 8, seed: 99, ..Default::default() };
        let r1 = fit(&p, &d, &stats(), &cfg).unwrap();
        let r2 = fit(&p, &d, &stats(), &cfg).unwrap();
        assert_eq!(r1.params, r2.params);
        let mut shuffled = d.clone();
        shuffled.samples.reverse();
        shuffled.samples.swap(3, 17);
        assert_eq!(fit(&p, &shuffled, &stats(), &cfg).unwrap().params, r1.params);
    }

    #[test]
    fn fit_reduces_probe_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = arch(HeadKind::Continuous, 256);
        let p = PolicyParams::init(a, &mut rng);
        let d = random_dataset(200, &mut rng);
        let cfg = TrainConfig { steps: 300, batch_size: 32, learning_rate: 1e-2, ..Default::default() };
        let r = fit(&p, &d, &stats(), &cfg).unwrap();
        assert!(r.final_probe_loss < r.initial_probe_loss);
    }

    #[test]
    fn divergence_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = arch(HeadKind::Continuous, 256);
        let p = PolicyParams::init(a, &mut rng);
        let d = random_dataset(20, &mut rng);
        let cfg = TrainConfig { steps: 200, learning_rate: 1e6, momentum: 0.5, ..Default::default() };
        let err = fit(&p, &d, &stats(), &cfg).unwrap_err();
        assert!(matches!(err, TrainError::Divergence { .. }), "{err}");
    }

    #[test]
    fn split_batch_covers_all() {
        assert_eq!(split_batch(64, &[0.5, 0.5]), vec![32, 32]);
        assert_eq!(split_batch(5, &[0.5, 0.5]), vec![3, 2]);
        assert_eq!(split_batch(7, &[1.0]), vec![7]);
    }

    #[test]
    fn dataset_jsonl_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let d = random_dataset(15, &mut rng);
        let mut buf = Vec::new();
        d.write_jsonl(&mut buf).unwrap();
        assert_eq!(Dataset::read_jsonl(&buf[..]).unwrap(), d);
        let cut = &buf[..buf.len() - 40];
        assert!(Dataset::read_jsonl(cut).is_err());
    }

    fn sample_checkpoint(head: HeadKind) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let p = PolicyParams::init(arch(head, 16), &mut rng);
        let mut prov = BTreeMap::new();
        prov.insert("seed".into(), "14".into());
        Checkpoint::new(p, stats(), prov)
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let ck = sample_checkpoint(HeadKind::Discrete);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn checkpoint_errors_are_distinct() {
        let ck = sample_checkpoint(HeadKind::Continuous);
        let bytes = ck.to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated { .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..5]), Err(CheckpointError::Truncated { .. })));
        let mut v = bytes.clone();
        v[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&v), Err(CheckpointError::VersionMismatch { found: 9, .. })));
        let mut m = bytes.clone();
        m[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&m), Err(CheckpointError::BadMagic)));
        let mut t = bytes.clone();
        t.extend_from_slice(&[0; 8]);
        assert!(matches!(Checkpoint::from_bytes(&t), Err(CheckpointError::TrailingBytes(8))));
        let text = String::from_utf8_lossy(&bytes).replace("param_count=", "param_count=1");
        let _ = text; // metadata tampering is covered below
        let tampered = {
            let s = std::str::from_utf8(&bytes[14..]).unwrap_or("");
            let _ = s;
            let meta_len = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
            let meta = std::str::from_utf8(&bytes[14..14 + meta_len]).unwrap().replace("hidden=6,5", "hidden=6,4");
            let mut out = bytes[..10].to_vec();
            out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
            out.extend_from_slice(meta.as_bytes());
            out.extend_from_slice(&bytes[14 + meta_len..]);
            out
        };
        assert!(matches!(Checkpoint::from_bytes(&tampered), Err(CheckpointError::Shape(_))));
    }

    #[test]
    fn head_guard_rejects_mismatch() {
        let ck = Checkpoint::from_bytes(&sample_checkpoint(HeadKind::Discrete).to_bytes()).unwrap();
        assert!(ck.require_head(HeadKind::Discrete).is_ok());
        assert!(matches!(ck.require_head(HeadKind::Continuous), Err(CheckpointError::HeadMismatch { .. })));
    }
}
