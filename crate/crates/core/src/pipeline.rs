//! Pipeline stages behind the command-line entry points. Each stage reads
//! its inputs from and writes its outputs to the run's output directory,
//! then records a manifest sufficient to re-run it.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arbiter::{run_episode, Agent, ArbiterConfig, ArbiterError, EpisodeRecord, Schedule};
use crate::config::{sha256_hex, ConfigError, RunConfig};
use crate::env::TaskId;
use crate::eval::{
    learning_curve, read_log, records_from_log, run_benchmark, standard_settings, summarize, workload_report,
    write_log, BenchmarkSuite, EvalError, Report, RoundPoint,
};
use crate::expert::{BciExpert, Expert, ExpertKind, ScriptedController, SlowExpert};
use crate::learnloop::{self, bootstrap_agent, collect_demos, demo_stats, LoopError, RoundMetrics};
use crate::train::{Checkpoint, CheckpointError, Dataset, TrainError};

pub const MANIFEST_VERSION: u32 = 1;
pub const LOCK_FILE: &str = ".collabarm.lock";

pub const DEMOS: &str = "demos.jsonl";
pub const DEMO_LOG: &str = "demo_log.jsonl";
pub const CHECKPOINT: &str = "checkpoint.ckpt";
pub const TRAIN_REPORT: &str = "train_report.json";
pub const EVAL_LOG: &str = "eval_log.jsonl";
pub const EVAL_CSV: &str = "eval_table.csv";
pub const EVAL_TXT: &str = "eval_table.txt";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const COLLAB_LOG: &str = "collab_log.jsonl";
pub const COLLAB_REPORT: &str = "collab_report.json";
pub const COLLAB_DATASET: &str = "collab_dataset.jsonl";
pub const COLLAB_CHECKPOINT: &str = "collab_checkpoint.ckpt";
pub const BCI_LOG: &str = "bci_log.jsonl";
pub const BCI_CSV: &str = "bci_table.csv";
pub const BCI_REPORT: &str = "bci_report.json";
pub const REPORT_CSV: &str = "report_table.csv";
pub const REPORT_TXT: &str = "report_table.txt";
pub const REPORT_JSON: &str = "report.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("output directory {0} is locked by another run (remove {1} if stale)")]
    Locked(PathBuf, String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("missing input {0}; run the producing stage first")]
    MissingInput(PathBuf),
    #[error(transparent)]
    Data(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Loop(#[from] LoopError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Arbiter(#[from] ArbiterError),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("re-run differs from manifest in {0:?}")]
    Mismatch(Vec<String>),
}

impl PipelineError {
    /// Short machine-parsable class for the command-line error line.
    pub fn class(&self) -> &'static str {
        match self {
            PipelineError::Config(_) | PipelineError::Usage(_) => "config",
            PipelineError::Locked(..) => "lock",
            PipelineError::Io { .. } => "io",
            PipelineError::MissingInput(_) | PipelineError::Data(_) => "data",
            PipelineError::Checkpoint(_) => "checkpoint",
            PipelineError::Loop(LoopError::Train(_)) => "train",
            PipelineError::Loop(LoopError::Arbiter(_)) | PipelineError::Arbiter(_) => "episode",
            PipelineError::Loop(_) => "collab",
            PipelineError::Eval(_) => "eval",
            PipelineError::Manifest(_) => "manifest",
            PipelineError::Mismatch(_) => "mismatch",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    DemoCollect,
    Train,
    Eval { fast: bool },
    Collab,
    BciSim,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::DemoCollect => "demo-collect",
            Stage::Train => "train",
            Stage::Eval { .. } => "eval",
            Stage::Collab => "collab",
            Stage::BciSim => "bci-sim",
            Stage::Report => "report",
        }
    }

    pub fn parse(name: &str, fast: bool) -> Option<Self> {
        Some(match name {
            "demo-collect" => Stage::DemoCollect,
            "train" => Stage::Train,
            "eval" => Stage::Eval { fast },
            "collab" => Stage::Collab,
            "bci-sim" => Stage::BciSim,
            "report" => Stage::Report,
            _ => return None,
        })
    }

    pub fn manifest_name(self) -> String {
        format!("manifest-{}.json", self.name())
    }
}

/// Everything needed to reproduce one stage run. No timestamps, no
/// absolute output paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub stage: String,
    pub fast: bool,
    pub code_version: String,
    pub config_hash: String,
    /// Canonical config text with `run.out_dir` blanked.
    pub config: String,
    pub seeds: BTreeMap<String, Vec<u64>>,
    /// File name to SHA-256 of the inputs read from the output directory.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| PipelineError::Manifest(e.to_string()))?;
        if m.version != MANIFEST_VERSION {
            return Err(PipelineError::Manifest(format!("version {} (expected {MANIFEST_VERSION})", m.version)));
        }
        Ok(m)
    }

    pub fn stage(&self) -> Result<Stage, PipelineError> {
        Stage::parse(&self.stage, self.fast).ok_or_else(|| PipelineError::Manifest(format!("unknown stage `{}`", self.stage)))
    }
}

pub fn code_version() -> String {
    format!("collabarm {}", env!("CARGO_PKG_VERSION"))
}

/// Config text and hash with the output directory removed, so the same
/// run in another directory hashes identically.
pub fn portable_config(cfg: &RunConfig) -> (String, String) {
    (cfg.portable_toml(), cfg.hash())
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self, PipelineError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(PipelineError::Locked(dir.to_path_buf(), LOCK_FILE.to_string()))
            }
            Err(e) => Err(PipelineError::Io { path, source: e }),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

struct StageIo<'a> {
    dir: &'a Path,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    seeds: BTreeMap<String, Vec<u64>>,
}

impl<'a> StageIo<'a> {
    fn new(dir: &'a Path) -> Self {
        Self { dir, inputs: BTreeMap::new(), outputs: BTreeMap::new(), seeds: BTreeMap::new() }
    }

    fn read(&mut self, name: &str) -> Result<Vec<u8>, PipelineError> {
        let path = self.dir.join(name);
        if !path.exists() {
            return Err(PipelineError::MissingInput(path));
        }
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        self.inputs.insert(name.to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(io_err(&path))?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn dataset(&mut self, name: &str) -> Result<Dataset, PipelineError> {
        let bytes = self.read(name)?;
        Ok(Dataset::read_jsonl(BufReader::new(bytes.as_slice()))?)
    }

    fn checkpoint(&mut self, name: &str) -> Result<Checkpoint, PipelineError> {
        Ok(Checkpoint::from_bytes(&self.read(name)?)?)
    }
}

fn log_bytes(run_id: &str, records: &[EpisodeRecord]) -> Result<Vec<u8>, PipelineError> {
    let mut buf = Vec::new();
    write_log(&mut buf, run_id, records)?;
    Ok(buf)
}

fn dataset_bytes(d: &Dataset) -> Result<Vec<u8>, PipelineError> {
    let mut buf = Vec::new();
    d.write_jsonl(&mut buf)?;
    Ok(buf)
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

/// Expert for the configured kind. Human experts live behind the session
/// server and must be supplied by the caller.
pub fn make_expert<'a>(cfg: &RunConfig, human: Option<&'a dyn Expert>) -> Result<ExpertBox<'a>, PipelineError> {
    let kind = cfg.expert_kind().expect("validated");
    let scripted = ScriptedController { gain: cfg.expert.gain };
    Ok(match kind {
        ExpertKind::Scripted if cfg.expert.latency_ticks == 1 => ExpertBox::Owned(Box::new(scripted)),
        ExpertKind::Scripted => {
            ExpertBox::Owned(Box::new(SlowExpert { inner: scripted, latency_ticks: cfg.expert.latency_ticks }))
        }
        ExpertKind::BciSim => ExpertBox::Owned(Box::new(bci_expert(cfg))),
        ExpertKind::HumanRemote => match human {
            Some(h) => ExpertBox::Borrowed(h),
            None => {
                return Err(PipelineError::Usage(
                    "expert.kind human-remote needs a connected session (run through the session server)".into(),
                ))
            }
        },
    })
}

pub enum ExpertBox<'a> {
    Owned(Box<dyn Expert>),
    Borrowed(&'a dyn Expert),
}

impl ExpertBox<'_> {
    pub fn get(&self) -> &dyn Expert {
        match self {
            ExpertBox::Owned(b) => b.as_ref(),
            ExpertBox::Borrowed(b) => *b,
        }
    }
}

pub fn bci_expert(cfg: &RunConfig) -> BciExpert {
    BciExpert { synth: cfg.bci.synth.clone(), margin_threshold: cfg.bci.margin_threshold, latency_ticks: cfg.bci.latency_ticks }
}

/// Loads a checkpoint and checks it against the configured head and
/// observation setup.
pub fn load_agent(cfg: &RunConfig, path: &Path) -> Result<Agent, PipelineError> {
    agent_from(cfg, Checkpoint::load(path)?)
}

fn agent_from(cfg: &RunConfig, ckpt: Checkpoint) -> Result<Agent, PipelineError> {
    ckpt.require_head(cfg.policy.head)?;
    if ckpt.meta.arch.obs_mode != cfg.policy.obs_mode || ckpt.meta.arch.history != cfg.policy.history {
        return Err(PipelineError::Usage(format!(
            "checkpoint observes {} with history {}, config asks for {} with history {}",
            ckpt.meta.arch.obs_mode.as_str(),
            ckpt.meta.arch.history,
            cfg.policy.obs_mode.as_str(),
            cfg.policy.history
        )));
    }
    Ok(Agent { params: ckpt.params, stats: ckpt.stats })
}

/// Result of one stage: its manifest and a short human-readable summary.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub manifest: Manifest,
    pub summary: String,
}

/// Runs `stage` in `cfg.run.out_dir` under the directory lock and writes
/// its manifest.
pub fn run_stage(cfg: &RunConfig, stage: Stage, human: Option<&dyn Expert>) -> Result<StageOutcome, PipelineError> {
    cfg.validate()?;
    let dir = cfg.run.out_dir.clone();
    let _lock = DirLock::acquire(&dir)?;
    let mut io = StageIo::new(&dir);
    let summary = match stage {
        Stage::DemoCollect => demo_collect(cfg, &mut io)?,
        Stage::Train => train(cfg, &mut io)?,
        Stage::Eval { fast } => eval(cfg, fast, human, &mut io)?,
        Stage::Collab => collab(cfg, human, &mut io)?,
        Stage::BciSim => bci_sim(cfg, &mut io)?,
        Stage::Report => report(cfg, &mut io)?,
    };
    let (config, config_hash) = portable_config(cfg);
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        stage: stage.name().to_string(),
        fast: matches!(stage, Stage::Eval { fast: true }),
        code_version: code_version(),
        config_hash,
        config,
        seeds: io.seeds,
        inputs: io.inputs,
        outputs: io.outputs,
    };
    let path = dir.join(stage.manifest_name());
    fs::write(&path, manifest.to_json()).map_err(io_err(&path))?;
    Ok(StageOutcome { manifest, summary })
}

fn demo_collect(cfg: &RunConfig, io: &mut StageIo) -> Result<String, PipelineError> {
    let env = cfg.env()?;
    let tasks = cfg.tasks()?;
    let expert = ScriptedController { gain: cfg.expert.gain };
    let (data, records) = collect_demos(
        &env,
        &expert,
        &tasks,
        cfg.demo.per_task,
        cfg.demo.seed_base,
        cfg.policy.obs_mode,
        cfg.policy.history,
    )?;
    io.seeds.insert("demo".into(), (0..cfg.demo.per_task as u64).map(|i| cfg.demo.seed_base + i).collect());
    io.write(DEMOS, &dataset_bytes(&data)?)?;
    io.write(DEMO_LOG, &log_bytes(&cfg.run.run_id, &records)?)?;
    let ok = records.iter().filter(|r| r.success).count();
    Ok(format!("{} episodes ({} successful), {} samples", records.len(), ok, data.len()))
}

fn train(cfg: &RunConfig, io: &mut StageIo) -> Result<String, PipelineError> {
    let demos = io.dataset(DEMOS)?;
    if demos.obs_mode != cfg.policy.obs_mode || demos.history != cfg.policy.history {
        return Err(PipelineError::Usage("demonstrations were collected with a different observation setup".into()));
    }
    let stats = demo_stats(&demos)?;
    let (agent, fit) = bootstrap_agent(&demos, stats, cfg.architecture(), &cfg.train)?;
    io.seeds.insert("train".into(), vec![cfg.train.seed]);
    let mut provenance = BTreeMap::new();
    provenance.insert("stage".into(), "train".into());
    provenance.insert("config_hash".into(), portable_config(cfg).1);
    provenance.insert("demos_sha256".into(), io.inputs[DEMOS].clone());
    provenance.insert("steps".into(), cfg.train.steps.to_string());
    provenance.insert("seed".into(), cfg.train.seed.to_string());
    let mut ckpt = Checkpoint::new(agent.params, agent.stats, provenance);
    ckpt.meta.tasks = cfg.tasks()?;
    io.write(CHECKPOINT, &ckpt.to_bytes())?;
    let report = serde_json::json!({
        "samples": demos.len(),
        "steps": cfg.train.steps,
        "initial_probe_loss": fit.initial_probe_loss,
        "final_probe_loss": fit.final_probe_loss,
    });
    io.write(TRAIN_REPORT, &json_bytes(&report))?;
    Ok(format!("probe loss {:.5} -> {:.5}", fit.initial_probe_loss, fit.final_probe_loss))
}

fn eval(cfg: &RunConfig, fast: bool, human: Option<&dyn Expert>, io: &mut StageIo) -> Result<String, PipelineError> {
    let agent = agent_from(cfg, io.checkpoint(CHECKPOINT)?)?;
    let env = cfg.env()?;
    let suite = cfg.suite(fast)?;
    let expert = make_expert(cfg, human)?;
    let schedules = standard_settings(&cfg.eval.sweep);
    let base = cfg.arbiter_config(cfg.arbiter.n);
    let run = run_benchmark(&env, Some(&agent), expert.get(), &suite, &schedules, &base)?;
    io.seeds.insert("eval".into(), suite.seeds.clone());
    io.write(EVAL_LOG, &log_bytes(&cfg.run.run_id, &run.records)?)?;
    let report = eval_report(&cfg.run.run_id, run.table.clone(), &run.records, cfg.arbiter.n);
    io.write(EVAL_CSV, run.table.to_csv().as_bytes())?;
    io.write(EVAL_TXT, run.table.to_text().as_bytes())?;
    io.write(EVAL_REPORT, report.to_json().as_bytes())?;
    Ok(run.table.to_text())
}

/// Report over an evaluation sweep; the workload compares interleave `n`
/// against the expert-only setting.
fn eval_report(run_id: &str, table: crate::eval::ResultTable, records: &[EpisodeRecord], n: u32) -> Report {
    let pick = |s: Schedule| records.iter().filter(|r| r.schedule == s).cloned().collect::<Vec<_>>();
    let workload = workload_report(&pick(Schedule::ExpertOnly), &pick(Schedule::Interleave(n)));
    let mut extra = BTreeMap::new();
    extra.insert("workload_setting".into(), serde_json::Value::String(Schedule::Interleave(n).label()));
    Report { run_id: run_id.to_string(), table, workload, curve: None, extra }
}

/// Per-round metrics plus the learning curve over collaboration success and
/// steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollabReport {
    pub run_id: String,
    pub expert: String,
    pub rounds: Vec<RoundMetrics>,
    pub curve: crate::eval::LearningCurve,
}

pub fn round_points(metrics: &[RoundMetrics]) -> Vec<RoundPoint> {
    metrics.iter().map(|m| RoundPoint { round: m.round, success: m.collab_success, steps: m.mean_steps }).collect()
}

fn collab(cfg: &RunConfig, human: Option<&dyn Expert>, io: &mut StageIo) -> Result<String, PipelineError> {
    let demos = io.dataset(DEMOS)?;
    let ckpt = match &cfg.collab.init_checkpoint {
        Some(path) => {
            let bytes = fs::read(path).map_err(io_err(path))?;
            io.inputs.insert(format!("init:{}", path.display()), sha256_hex(&bytes));
            Checkpoint::from_bytes(&bytes)?
        }
        None => io.checkpoint(CHECKPOINT)?,
    };
    let tasks = ckpt.meta.tasks.clone();
    let agent = agent_from(cfg, ckpt)?;
    let env = cfg.env()?;
    let expert = make_expert(cfg, human)?;
    let lcfg = cfg.collab_config()?;
    io.seeds.insert("eval".into(), lcfg.eval.seeds.clone());
    io.seeds.insert("train".into(), (0..cfg.collab.rounds as u64).map(|r| cfg.train.seed.wrapping_add(r)).collect());
    io.seeds.insert("collab_base".into(), vec![cfg.collab.seed_base]);
    let out = learnloop::run(&env, &agent, &demos, expert.get(), &lcfg)?;
    io.write(COLLAB_LOG, &log_bytes(&cfg.run.run_id, &out.records)?)?;
    io.write(COLLAB_DATASET, &dataset_bytes(&out.dataset)?)?;
    let mut provenance = BTreeMap::new();
    provenance.insert("stage".into(), "collab".into());
    provenance.insert("config_hash".into(), portable_config(cfg).1);
    provenance.insert("rounds".into(), cfg.collab.rounds.to_string());
    provenance.insert("expert".into(), cfg.expert.kind.clone());
    let mut out_ckpt = Checkpoint::new(out.agent.params.clone(), out.agent.stats, provenance);
    out_ckpt.meta.tasks = tasks;
    io.write(COLLAB_CHECKPOINT, &out_ckpt.to_bytes())?;
    let report = CollabReport {
        run_id: cfg.run.run_id.clone(),
        expert: cfg.expert.kind.clone(),
        curve: learning_curve(&round_points(&out.metrics)),
        rounds: out.metrics.clone(),
    };
    io.write(COLLAB_REPORT, &json_bytes(&report))?;
    let lines: Vec<String> = out
        .metrics
        .iter()
        .map(|m| {
            format!(
                "round {}: policy-only success {:.3} -> {:.3}, {} episodes, collaboration success {:.3}",
                m.round, m.pre_success, m.post_success, m.episodes, m.collab_success
            )
        })
        .collect();
    Ok(lines.join("\n"))
}

/// Per-task outcome of the slow-expert comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BciTaskTiming {
    pub task: String,
    pub collab_successes: usize,
    pub trials: usize,
    pub collab_ticks: u64,
    pub reference_ticks: u64,
    /// `collab_ticks / reference_ticks`.
    pub tick_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BciReport {
    pub run_id: String,
    pub setting: String,
    pub latency_ticks: u64,
    pub tasks: Vec<BciTaskTiming>,
    pub collab_ticks: u64,
    pub reference_ticks: u64,
    pub tick_ratio: f64,
    pub table: crate::eval::ResultTable,
}

/// Collaboration with the synthetic SSVEP expert at `bci.n` against the
/// scripted controller acting alone at the same per-decision latency.
pub fn bci_comparison(
    cfg: &RunConfig,
    agent: &Agent,
) -> Result<(BciReport, Vec<EpisodeRecord>), PipelineError> {
    let env = cfg.env()?;
    let tasks = cfg.bci_tasks()?;
    let seeds: Vec<u64> = (0..cfg.bci.seeds as u64).map(|i| cfg.bci.seed_base + i).collect();
    let bci = bci_expert(cfg);
    let slow = SlowExpert { inner: ScriptedController { gain: cfg.expert.gain }, latency_ticks: cfg.bci.latency_ticks };
    let collab_cfg = cfg.arbiter_config(cfg.bci.n);
    let ref_cfg = ArbiterConfig { schedule: Schedule::ExpertOnly, ..collab_cfg };
    let mut collab_records = Vec::new();
    let mut ref_records = Vec::new();
    let mut timings = Vec::new();
    for &task in &tasks {
        let mut t = BciTaskTiming {
            task: task.name().to_string(),
            collab_successes: 0,
            trials: seeds.len(),
            collab_ticks: 0,
            reference_ticks: 0,
            tick_ratio: 0.0,
        };
        for &seed in &seeds {
            let c = run_episode(&env, Some(agent), &bci, task, seed, &collab_cfg)?;
            let r = run_episode(&env, None, &slow, task, seed, &ref_cfg)?;
            t.collab_successes += c.success as usize;
            t.collab_ticks += c.ticks;
            t.reference_ticks += r.ticks;
            collab_records.push(c);
            ref_records.push(r);
        }
        t.tick_ratio = t.collab_ticks as f64 / t.reference_ticks.max(1) as f64;
        timings.push(t);
    }
    let suite = BenchmarkSuite { tasks: tasks.clone(), seeds };
    let schedules = [collab_cfg.schedule, Schedule::ExpertOnly];
    let mut records = collab_records;
    records.extend(ref_records);
    let collab_ticks: u64 = timings.iter().map(|t| t.collab_ticks).sum();
    let reference_ticks: u64 = timings.iter().map(|t| t.reference_ticks).sum();
    let report = BciReport {
        run_id: cfg.run.run_id.clone(),
        setting: collab_cfg.schedule.label(),
        latency_ticks: cfg.bci.latency_ticks,
        tasks: timings,
        collab_ticks,
        reference_ticks,
        tick_ratio: collab_ticks as f64 / reference_ticks.max(1) as f64,
        table: summarize(&records, &suite, &schedules),
    };
    Ok((report, records))
}

fn bci_sim(cfg: &RunConfig, io: &mut StageIo) -> Result<String, PipelineError> {
    let agent = agent_from(cfg, io.checkpoint(CHECKPOINT)?)?;
    let (report, records) = bci_comparison(cfg, &agent)?;
    io.seeds.insert("bci".into(), (0..cfg.bci.seeds as u64).map(|i| cfg.bci.seed_base + i).collect());
    io.write(BCI_LOG, &log_bytes(&cfg.run.run_id, &records)?)?;
    io.write(BCI_CSV, report.table.to_csv().as_bytes())?;
    io.write(BCI_REPORT, &json_bytes(&report))?;
    let mut lines: Vec<String> = report
        .tasks
        .iter()
        .map(|t| {
            format!(
                "{:<13} {}/{} succeeded, ticks {} vs {} ({:.1}%)",
                t.task,
                t.collab_successes,
                t.trials,
                t.collab_ticks,
                t.reference_ticks,
                100.0 * t.tick_ratio
            )
        })
        .collect();
    lines.push(format!(
        "total ticks {} ({}) vs {} (slow expert alone): {:.1}%",
        report.collab_ticks,
        report.setting,
        report.reference_ticks,
        100.0 * report.tick_ratio
    ));
    Ok(lines.join("\n"))
}

/// Recomputes the result table from the trajectory log. Suite and settings
/// are taken from the log in order of first appearance.
pub fn table_from_log(lines: &[crate::eval::LogLine]) -> Result<(crate::eval::ResultTable, Vec<EpisodeRecord>), PipelineError> {
    let records = records_from_log(lines)?;
    let mut tasks: Vec<TaskId> = Vec::new();
    let mut seeds: Vec<u64> = Vec::new();
    let mut schedules: Vec<Schedule> = Vec::new();
    for r in &records {
        if !tasks.contains(&r.task) {
            tasks.push(r.task);
        }
        if !seeds.contains(&r.seed) {
            seeds.push(r.seed);
        }
        if !schedules.contains(&r.schedule) {
            schedules.push(r.schedule);
        }
    }
    let suite = BenchmarkSuite { tasks, seeds };
    Ok((summarize(&records, &suite, &schedules), records))
}

fn report(cfg: &RunConfig, io: &mut StageIo) -> Result<String, PipelineError> {
    let log = io.read(EVAL_LOG)?;
    let lines = read_log(BufReader::new(log.as_slice()))?;
    let (table, records) = table_from_log(&lines)?;
    let mut report = eval_report(&cfg.run.run_id, table.clone(), &records, cfg.arbiter.n);
    let mut text = table.to_text();
    if io.dir.join(COLLAB_REPORT).exists() {
        let bytes = io.read(COLLAB_REPORT)?;
        let collab: CollabReport =
            serde_json::from_slice(&bytes).map_err(|e| PipelineError::Manifest(format!("{COLLAB_REPORT}: {e}")))?;
        let curve = learning_curve(&round_points(&collab.rounds));
        text.push_str(&format!(
            "\nlearning curve over {} rounds: r(success, round) = {}, r(steps, round) = {}\n",
            curve.points.len(),
            fmt_r(curve.success_vs_round),
            fmt_r(curve.steps_vs_round)
        ));
        report.curve = Some(curve);
    }
    if let Some(w) = &report.workload {
        text.push_str(&format!(
            "\nexpert workload reduction at {}: {:.2}% ({:.2} vs {:.2} expert steps)\n",
            Schedule::Interleave(cfg.arbiter.n).label(),
            100.0 * w.reduction,
            w.collab_expert_steps,
            w.reference_expert_steps
        ));
    }
    io.write(REPORT_CSV, table.to_csv().as_bytes())?;
    io.write(REPORT_TXT, text.as_bytes())?;
    io.write(REPORT_JSON, report.to_json().as_bytes())?;
    Ok(text)
}

fn fmt_r(r: Option<f64>) -> String {
    r.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"))
}

/// Result of re-running a stage from its manifest.
#[derive(Debug, Clone)]
pub struct RerunOutcome {
    pub stage: Stage,
    pub compared: Vec<String>,
}

/// Re-runs the stage described by `manifest_path` into `out_dir`: inputs
/// are copied from the manifest's directory after checking their hashes,
/// and every output must come out byte-identical.
pub fn rerun(manifest_path: &Path, out_dir: &Path) -> Result<RerunOutcome, PipelineError> {
    let manifest = Manifest::load(manifest_path)?;
    let stage = manifest.stage()?;
    let mut cfg = RunConfig::from_toml(&manifest.config)?;
    if portable_config(&cfg).1 != manifest.config_hash {
        return Err(PipelineError::Manifest("config text does not match its hash".into()));
    }
    cfg.run.out_dir = out_dir.to_path_buf();
    let src = manifest_path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    for (name, hash) in &manifest.inputs {
        if name.starts_with("init:") {
            continue;
        }
        let from = src.join(name);
        let bytes = fs::read(&from).map_err(io_err(&from))?;
        if &sha256_hex(&bytes) != hash {
            return Err(PipelineError::Manifest(format!("input {name} changed since the recorded run")));
        }
        let to = out_dir.join(name);
        if to != from {
            fs::write(&to, &bytes).map_err(io_err(&to))?;
        }
    }
    let outcome = run_stage(&cfg, stage, None)?;
    let differing: Vec<String> = manifest
        .outputs
        .iter()
        .filter(|(k, v)| outcome.manifest.outputs.get(*k) != Some(*v))
        .map(|(k, _)| k.clone())
        .collect();
    if !differing.is_empty() {
        return Err(PipelineError::Mismatch(differing));
    }
    if outcome.manifest != manifest {
        return Err(PipelineError::Mismatch(vec![stage.manifest_name()]));
    }
    Ok(RerunOutcome { stage, compared: manifest.outputs.keys().cloned().collect() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dir: &Path) -> RunConfig {
        RunConfig::load(
            None,
            &[],
            &[
                format!("run.out_dir=\"{}\"", dir.display()),
                "run.tasks=[\"reach\", \"pick place\"]".into(),
                "demo.per_task=4".into(),
                "train.steps=30".into(),
                "policy.hidden=[8]".into(),
                "eval.trials=3".into(),
                "eval.sweep=[2]".into(),
                "collab.buffer_capacity=20".into(),
                "bci.seeds=1".into(),
                "bci.tasks=[\"button press\"]".into(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = DirLock::acquire(dir.path()).unwrap();
        assert!(matches!(DirLock::acquire(dir.path()), Err(PipelineError::Locked(..))));
        drop(a);
        DirLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn locked_directory_blocks_a_stage() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let _held = DirLock::acquire(dir.path()).unwrap();
        let err = run_stage(&cfg, Stage::DemoCollect, None).unwrap_err();
        assert_eq!(err.class(), "lock");
        assert!(!dir.path().join(DEMOS).exists());
    }

    #[test]
    fn missing_input_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let err = run_stage(&tiny(dir.path()), Stage::Train, None).unwrap_err();
        assert!(matches!(err, PipelineError::MissingInput(_)));
        assert_eq!(err.class(), "data");
    }

    #[test]
    fn human_expert_requires_a_link() {
        let mut cfg = RunConfig::default();
        cfg.expert.kind = "human-remote".into();
        assert!(matches!(make_expert(&cfg, None), Err(PipelineError::Usage(_))));
    }

    #[test]
    fn stages_chain_and_report_matches_eval() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        for stage in [Stage::DemoCollect, Stage::Train, Stage::Eval { fast: false }, Stage::Report] {
            let out = run_stage(&cfg, stage, None).unwrap();
            assert!(dir.path().join(stage.manifest_name()).exists());
            assert!(!out.manifest.outputs.is_empty());
        }
        let eval_csv = fs::read(dir.path().join(EVAL_CSV)).unwrap();
        let report_csv = fs::read(dir.path().join(REPORT_CSV)).unwrap();
        assert_eq!(eval_csv, report_csv);
        assert!(!dir.path().join(LOCK_FILE).exists());
    }

    #[test]
    fn manifest_has_no_output_path() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(dir.path());
        let out = run_stage(&cfg, Stage::DemoCollect, None).unwrap();
        let text = out.manifest.to_json();
        assert!(!text.contains(&dir.path().display().to_string()));
        let base = crate::learnloop::DEMO_SEED_BASE;
        assert_eq!(out.manifest.seeds["demo"], (base..base + 4).collect::<Vec<_>>());
    }

    #[test]
    fn rerun_reproduces_every_stage() {
        let a = tempfile::tempdir().unwrap();
        let cfg = tiny(a.path());
        let stages = [
            Stage::DemoCollect,
            Stage::Train,
            Stage::Eval { fast: true },
            Stage::Collab,
            Stage::BciSim,
            Stage::Report,
        ];
        for stage in stages {
            run_stage(&cfg, stage, None).unwrap();
        }
        for stage in stages {
            let b = tempfile::tempdir().unwrap();
            let out = rerun(&a.path().join(stage.manifest_name()), b.path()).unwrap();
            assert_eq!(out.stage, stage);
            assert!(!out.compared.is_empty());
        }
    }

    #[test]
    fn rerun_rejects_tampered_input() {
        let a = tempfile::tempdir().unwrap();
        let cfg = tiny(a.path());
        run_stage(&cfg, Stage::DemoCollect, None).unwrap();
        run_stage(&cfg, Stage::Train, None).unwrap();
        let demos = a.path().join(DEMOS);
        let mut text = fs::read_to_string(&demos).unwrap();
        text.push('\n');
        fs::write(&demos, text).unwrap();
        let b = tempfile::tempdir().unwrap();
        let err = rerun(&a.path().join(Stage::Train.manifest_name()), b.path()).unwrap_err();
        assert_eq!(err.class(), "manifest");
    }
}
