//! Run configuration: a TOML file, `COLLABARM_SECTION__KEY` environment
//! overrides and `section.key=value` flag overrides, applied in that order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::arbiter::{ArbiterConfig, Schedule};
use crate::bci::{SynthConfig, DEFAULT_MARGIN_THRESHOLD};
use crate::env::{Env, Physics, TaskId, TaskSpec, FAILURE_THRESHOLD};
use crate::eval::{BenchmarkSuite, DEFAULT_SWEEP, DEFAULT_TRIALS, EVAL_SEED_BASE, FAST_TRIALS};
use crate::expert::{ExpertKind, TimeoutPolicy, DEFAULT_LATENCY_TICKS};
use crate::learnloop::{CollabLearnConfig, CollectConfig, COLLAB_SEED_BASE, DEFAULT_BUFFER_CAPACITY, DEMO_SEED_BASE};
use crate::obs::{HeadKind, ObsMode};
use crate::policy::{Architecture, DEFAULT_INPUT_SCALE};
use crate::train::TrainConfig;

pub const ENV_PREFIX: &str = "COLLABARM_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("bad override `{0}`: expected section.key=value")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Stage outputs land here; one directory per concurrent run.
    pub out_dir: PathBuf,
    /// Written into every log line; never derived from the clock.
    pub run_id: String,
    /// Task names as they appear in the benchmark table.
    pub tasks: Vec<String>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("runs/default"),
            run_id: "default".into(),
            tasks: TaskId::ALL.iter().map(|t| t.name().to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoSection {
    pub per_task: usize,
    pub seed_base: u64,
}

impl Default for DemoSection {
    fn default() -> Self {
        Self { per_task: 50, seed_base: DEMO_SEED_BASE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub head: HeadKind,
    pub obs_mode: ObsMode,
    pub history: usize,
    pub hidden: Vec<usize>,
    pub vocab_size: usize,
    pub input_scale: f64,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            head: HeadKind::Continuous,
            obs_mode: ObsMode::StateVector,
            history: 1,
            hidden: vec![128, 128],
            vocab_size: 256,
            input_scale: DEFAULT_INPUT_SCALE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArbiterSection {
    /// Interleave ratio used by `collab` and `serve`.
    pub n: u32,
    pub failure_threshold: u32,
}

impl Default for ArbiterSection {
    fn default() -> Self {
        Self { n: 4, failure_threshold: FAILURE_THRESHOLD }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub trials: usize,
    pub seed_base: u64,
    /// Interleave ratios swept by `eval`, besides policy-only and expert-only.
    pub sweep: Vec<u32>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { trials: DEFAULT_TRIALS, seed_base: EVAL_SEED_BASE, sweep: DEFAULT_SWEEP.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollabSection {
    pub rounds: u32,
    pub buffer_capacity: usize,
    pub bootstrap_share: f64,
    pub seed_base: u64,
    pub episode_cap: usize,
    /// Checkpoint to re-tune from; the `train` output when unset.
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for CollabSection {
    fn default() -> Self {
        Self {
            rounds: 1,
            buffer_capacity: DEFAULT_BUFFER_CAPACITY,
            bootstrap_share: 0.5,
            seed_base: COLLAB_SEED_BASE,
            episode_cap: 20_000,
            init_checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertSection {
    pub kind: String,
    pub gain: f64,
    /// Ticks charged per expert decision; above 1 the scripted controller
    /// becomes a slow expert.
    pub latency_ticks: u64,
    pub human_timeout_s: f64,
    pub on_timeout: TimeoutPolicy,
    /// Prompts per human turn before the episode is abandoned.
    pub max_prompts: u32,
}

impl Default for ExpertSection {
    fn default() -> Self {
        Self {
            kind: ExpertKind::Scripted.as_str().into(),
            gain: 1.0,
            latency_ticks: 1,
            human_timeout_s: 30.0,
            on_timeout: TimeoutPolicy::Reprompt,
            max_prompts: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BciSection {
    pub synth: SynthConfig,
    pub margin_threshold: f64,
    pub latency_ticks: u64,
    pub n: u32,
    pub tasks: Vec<String>,
    pub seeds: usize,
    pub seed_base: u64,
}

impl Default for BciSection {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            margin_threshold: DEFAULT_MARGIN_THRESHOLD,
            latency_ticks: DEFAULT_LATENCY_TICKS,
            n: 16,
            tasks: ["window open", "drawer close", "button press", "door open"].map(String::from).to_vec(),
            seeds: 5,
            seed_base: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSection {
    pub addr: String,
    /// Policy steps shown per second during human sessions; 0 disables throttling.
    pub steps_per_second: f64,
    pub heartbeat_s: f64,
    /// Missed heartbeat intervals before a client counts as gone.
    pub heartbeat_misses: u32,
    /// Checkpoint driving the policy side; expert-only sessions without it.
    pub checkpoint: Option<PathBuf>,
}

impl Default for ServerSection {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8765".into(),
            steps_per_second: 10.0,
            heartbeat_s: 2.0,
            heartbeat_misses: 3,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub physics: Physics,
    /// Replaces the built-in spec of the named task.
    pub task_specs: Vec<TaskSpec>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub env: EnvSection,
    pub demo: DemoSection,
    pub policy: PolicySection,
    pub train: TrainConfig,
    pub arbiter: ArbiterSection,
    pub eval: EvalSection,
    pub collab: CollabSection,
    pub expert: ExpertSection,
    pub bci: BciSection,
    pub server: ServerSection,
}

impl RunConfig {
    /// Reads `path` (if any), then applies environment and flag overrides.
    pub fn load(path: Option<&Path>, env_vars: &[(String, String)], sets: &[String]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Read { path: p.to_path_buf(), source })?,
            None => String::new(),
        };
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for (k, v) in env_vars {
            if let Some(rest) = k.strip_prefix(ENV_PREFIX) {
                let key = rest.to_ascii_lowercase().replace("__", ".");
                set_path(&mut table, &key, v)?;
            }
        }
        for s in sets {
            let (k, v) = s.split_once('=').ok_or_else(|| ConfigError::Override(s.clone()))?;
            set_path(&mut table, k.trim(), v.trim())?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical serialization; the hash is taken over this text.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hash of the canonical text with `run.out_dir` blanked, so the same
    /// run in another directory hashes identically.
    pub fn hash(&self) -> String {
        sha256_hex(self.portable_toml().as_bytes())
    }

    pub fn portable_toml(&self) -> String {
        let mut c = self.clone();
        c.run.out_dir = PathBuf::new();
        c.to_toml()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.run.run_id.is_empty() || self.run.run_id.contains(['\n', ',']) {
            return bad("run.run_id must be non-empty without commas or newlines".into());
        }
        let tasks = self.tasks()?;
        if tasks.is_empty() {
            return bad("run.tasks is empty".into());
        }
        self.env()?;
        if self.demo.per_task == 0 {
            return bad("demo.per_task must be positive".into());
        }
        let p = &self.policy;
        if p.history == 0 || p.vocab_size < 2 || p.hidden.contains(&0) {
            return bad("policy: history >= 1, vocab_size >= 2 and non-zero hidden sizes required".into());
        }
        if !(p.input_scale.is_finite() && p.input_scale > 0.0) {
            return bad("policy.input_scale must be positive".into());
        }
        if self.train.steps == 0 {
            return bad("train.steps must be positive".into());
        }
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.arbiter_config(self.arbiter.n)
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("arbiter: {e}")))?;
        if self.eval.trials == 0 || self.eval.sweep.contains(&0) {
            return bad("eval: trials must be positive and every N at least 1".into());
        }
        let c = &self.collab;
        if c.rounds == 0 || c.episode_cap == 0 || !(0.0..=1.0).contains(&c.bootstrap_share) {
            return bad("collab: rounds >= 1, episode_cap >= 1, bootstrap_share in [0, 1]".into());
        }
        let e = &self.expert;
        if self.expert_kind().is_none() {
            return bad(format!("expert.kind `{}` is not one of scripted, human-remote, bci-sim", e.kind));
        }
        if !(e.gain.is_finite() && e.gain > 0.0) || e.latency_ticks == 0 || e.max_prompts == 0 {
            return bad("expert: gain > 0, latency_ticks >= 1, max_prompts >= 1".into());
        }
        if !(e.human_timeout_s.is_finite() && e.human_timeout_s > 0.0) {
            return bad("expert.human_timeout_s must be positive".into());
        }
        let b = &self.bci;
        b.synth.validate().map_err(|e| ConfigError::Invalid(format!("bci.synth: {e}")))?;
        if b.latency_ticks == 0 || b.n == 0 || b.seeds == 0 || !(b.margin_threshold >= 0.0) {
            return bad("bci: latency_ticks, n and seeds must be positive, margin_threshold >= 0".into());
        }
        parse_tasks(&b.tasks)?;
        let s = &self.server;
        if !(s.steps_per_second >= 0.0 && s.steps_per_second.is_finite()) {
            return bad("server.steps_per_second must be finite and non-negative (0 disables throttling)".into());
        }
        if !(s.heartbeat_s > 0.0 && s.heartbeat_s.is_finite()) || s.heartbeat_misses == 0 {
            return bad("server: heartbeat_s and heartbeat_misses must be positive".into());
        }
        Ok(())
    }

    pub fn tasks(&self) -> Result<Vec<TaskId>, ConfigError> {
        parse_tasks(&self.run.tasks)
    }

    pub fn bci_tasks(&self) -> Result<Vec<TaskId>, ConfigError> {
        parse_tasks(&self.bci.tasks)
    }

    pub fn expert_kind(&self) -> Option<ExpertKind> {
        ExpertKind::parse(&self.expert.kind)
    }

    pub fn env(&self) -> Result<Env, ConfigError> {
        let mut env = Env { physics: self.env.physics, ..Env::default() };
        for spec in &self.env.task_specs {
            let slot = env.tasks.iter_mut().find(|s| s.task == spec.task).expect("built-in spec per task");
            *slot = spec.clone();
        }
        let p = &env.physics;
        if ![p.max_step, p.grasp_radius, p.engage_radius, p.gripper_radius, p.object_radius, p.slot_half_width]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
        {
            return Err(ConfigError::Invalid("env.physics lengths must be positive".into()));
        }
        if env.tasks.iter().any(|s| !(s.success_threshold > 0.0)) {
            return Err(ConfigError::Invalid("task success thresholds must be positive".into()));
        }
        Ok(env)
    }

    pub fn architecture(&self) -> Architecture {
        let p = &self.policy;
        Architecture::new(p.obs_mode, p.history, p.hidden.clone(), p.head, p.vocab_size).with_input_scale(p.input_scale)
    }

    pub fn arbiter_config(&self, n: u32) -> ArbiterConfig {
        ArbiterConfig {
            schedule: Schedule::Interleave(n),
            failure_threshold: self.arbiter.failure_threshold,
            obs_mode: self.policy.obs_mode,
            history: self.policy.history,
        }
    }

    /// Evaluation suite; `fast` keeps the first ten seeds of the same list.
    pub fn suite(&self, fast: bool) -> Result<BenchmarkSuite, ConfigError> {
        let trials = if fast { FAST_TRIALS.min(self.eval.trials) } else { self.eval.trials };
        let tasks = self.tasks()?;
        Ok(BenchmarkSuite { seeds: (0..trials as u64).map(|i| self.eval.seed_base + i).collect(), tasks })
    }

    pub fn collab_config(&self) -> Result<CollabLearnConfig, ConfigError> {
        Ok(CollabLearnConfig {
            rounds: self.collab.rounds,
            collect: CollectConfig {
                arbiter: self.arbiter_config(self.arbiter.n),
                capacity: self.collab.buffer_capacity,
                tasks: self.tasks()?,
                seed_base: self.collab.seed_base,
                episode_cap: self.collab.episode_cap,
            },
            train: self.train.clone(),
            eval: self.suite(false)?,
            bootstrap_share: self.collab.bootstrap_share,
        })
    }
}

fn parse_tasks(names: &[String]) -> Result<Vec<TaskId>, ConfigError> {
    let mut out = Vec::with_capacity(names.len());
    for n in names {
        let t = TaskId::from_name(n).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if out.contains(&t) {
            return Err(ConfigError::Invalid(format!("task `{n}` listed twice")));
        }
        out.push(t);
    }
    Ok(out)
}

/// Sets a dotted key; the value is read as a TOML literal, falling back to a
/// bare string.
fn set_path(table: &mut toml::Table, key: &str, raw: &str) -> Result<(), ConfigError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::Override(format!("{key}={raw}")));
    }
    let value = parse_literal(raw);
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::Override(format!("{key}: `{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
