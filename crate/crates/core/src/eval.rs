//! Seeded benchmark harness: shared seed lists, per-setting result tables,
//! workload accounting, learning-curve statistics and the trajectory log.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arbiter::{run_episode, Actor, Agent, ArbiterConfig, ArbiterError, EpisodeRecord, Schedule, StepRecord};
use crate::env::{Action, Env, TaskId};
use crate::expert::{Expert, ExpertKind};

pub const EVAL_SEED_BASE: u64 = 10_000;
pub const DEFAULT_TRIALS: usize = 50;
pub const FAST_TRIALS: usize = 10;
pub const DEFAULT_SWEEP: [u32; 6] = [32, 16, 8, 4, 2, 1];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Arbiter(#[from] ArbiterError),
    #[error("report io: {0}")]
    Io(#[from] std::io::Error),
    #[error("report parse error: {0}")]
    Parse(String),
}

/// Tasks and the seed list shared by every compared setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSuite {
    pub tasks: Vec<TaskId>,
    pub seeds: Vec<u64>,
}

impl BenchmarkSuite {
    /// `trials` consecutive seeds starting at the evaluation base, so a
    /// smaller suite is always a prefix of a larger one.
    pub fn new(tasks: Vec<TaskId>, trials: usize) -> Self {
        Self { tasks, seeds: (0..trials as u64).map(|i| EVAL_SEED_BASE + i).collect() }
    }

    pub fn standard() -> Self {
        Self::new(TaskId::ALL.to_vec(), DEFAULT_TRIALS)
    }

    pub fn fast() -> Self {
        Self::new(TaskId::ALL.to_vec(), FAST_TRIALS)
    }

    pub fn trials(&self) -> usize {
        self.seeds.len()
    }
}

/// Runs every `(schedule, task, seed)` triple. Episodes execute in parallel
/// unless the expert is a human; results come back in
/// `(schedule, task, seed)` order regardless of completion order.
pub fn run_settings(
    env: &Env,
    agent: Option<&Agent>,
    expert: &dyn Expert,
    suite: &BenchmarkSuite,
    schedules: &[Schedule],
    base: &ArbiterConfig,
) -> Result<Vec<EpisodeRecord>, EvalError> {
    let jobs: Vec<(Schedule, TaskId, u64)> = schedules
        .iter()
        .flat_map(|&s| suite.tasks.iter().flat_map(move |&t| suite.seeds.iter().map(move |&seed| (s, t, seed))))
        .collect();
    let run = |&(schedule, task, seed): &(Schedule, TaskId, u64)| {
        let cfg = ArbiterConfig { schedule, ..*base };
        let policy = if schedule.needs_policy() { agent } else { None };
        run_episode(env, policy, expert, task, seed, &cfg)
    };
    let results: Vec<Result<EpisodeRecord, ArbiterError>> = if expert.kind() == ExpertKind::HumanRemote {
        jobs.iter().map(run).collect()
    } else {
        jobs.par_iter().map(run).collect()
    };
    results.into_iter().map(|r| r.map_err(EvalError::from)).collect()
}

/// Policy-only baseline, expert-only reference and the interleaved sweep.
pub fn standard_settings(sweep: &[u32]) -> Vec<Schedule> {
    let mut v = vec![Schedule::PolicyOnly];
    v.extend(sweep.iter().map(|&n| Schedule::Interleave(n)));
    v.push(Schedule::ExpertOnly);
    v
}

pub struct BenchmarkRun {
    pub table: ResultTable,
    pub records: Vec<EpisodeRecord>,
}

pub fn run_benchmark(
    env: &Env,
    agent: Option<&Agent>,
    expert: &dyn Expert,
    suite: &BenchmarkSuite,
    schedules: &[Schedule],
    base: &ArbiterConfig,
) -> Result<BenchmarkRun, EvalError> {
    let records = run_settings(env, agent, expert, suite, schedules, base)?;
    let table = summarize(&records, suite, schedules);
    Ok(BenchmarkRun { table, records })
}

/// Mean policy-only success over the suite.
pub fn policy_success(env: &Env, agent: &Agent, suite: &BenchmarkSuite, base: &ArbiterConfig) -> Result<f64, EvalError> {
    let recs = run_settings(env, Some(agent), &crate::expert::ScriptedController::default(), suite, &[Schedule::PolicyOnly], base)?;
    Ok(success_rate(&recs))
}

pub fn success_rate(records: &[EpisodeRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| r.success).count() as f64 / records.len() as f64
}

// ---------------------------------------------------------------------------
// Result table
// ---------------------------------------------------------------------------

pub const AGGREGATE: &str = "all";

/// One `(setting, task)` cell. Means are `None` when no episode backs them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub setting: String,
    pub task: String,
    pub trials: usize,
    pub success_rate: Option<f64>,
    pub mean_steps: Option<f64>,
    pub mean_expert_steps: Option<f64>,
    pub mean_expert_fraction: Option<f64>,
    pub mean_ticks: Option<f64>,
    /// Mean steps over successful episodes only.
    pub success_mean_steps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn row_for(setting: &str, task: &str, eps: &[&EpisodeRecord]) -> ResultRow {
    ResultRow {
        setting: setting.to_string(),
        task: task.to_string(),
        trials: eps.len(),
        success_rate: mean(eps.iter().map(|r| if r.success { 1.0 } else { 0.0 })),
        mean_steps: mean(eps.iter().map(|r| r.total_steps() as f64)),
        mean_expert_steps: mean(eps.iter().map(|r| r.expert_steps as f64)),
        mean_expert_fraction: mean(eps.iter().map(|r| r.expert_fraction())),
        mean_ticks: mean(eps.iter().map(|r| r.ticks as f64)),
        success_mean_steps: mean(eps.iter().filter(|r| r.success).map(|r| r.total_steps() as f64)),
    }
}

/// Builds the table from episode records: one row per `(setting, task)`
/// in the suite, plus an aggregate row per setting. Cells without
/// episodes are kept with null statistics.
pub fn summarize(records: &[EpisodeRecord], suite: &BenchmarkSuite, schedules: &[Schedule]) -> ResultTable {
    let mut rows = Vec::new();
    for &s in schedules {
        let label = s.label();
        let mut all = Vec::new();
        for &t in &suite.tasks {
            let eps: Vec<&EpisodeRecord> = records.iter().filter(|r| r.schedule == s && r.task == t).collect();
            rows.push(row_for(&label, t.name(), &eps));
            all.extend(eps);
        }
        rows.push(row_for(&label, AGGREGATE, &all));
    }
    ResultTable { rows }
}

const CSV_HEADER: &str =
    "setting,task,trials,success_rate,mean_steps,mean_expert_steps,mean_expert_fraction,mean_ticks,success_mean_steps";

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "null".to_string(), |x| x.to_string())
}

fn parse_cell(s: &str) -> Result<Option<f64>, EvalError> {
    if s == "null" {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| EvalError::Parse(format!("bad number `{s}`")))
}

impl ResultTable {
    pub fn row(&self, setting: &str, task: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.setting == setting && r.task == task)
    }

    /// Aggregate success for a setting.
    pub fn success(&self, setting: &str) -> Option<f64> {
        self.row(setting, AGGREGATE).and_then(|r| r.success_rate)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.setting,
                r.task,
                r.trials,
                cell(r.success_rate),
                cell(r.mean_steps),
                cell(r.mean_expert_steps),
                cell(r.mean_expert_fraction),
                cell(r.mean_ticks),
                cell(r.success_mean_steps)
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, EvalError> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(EvalError::Parse("unexpected csv header".into()));
        }
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(EvalError::Parse(format!("expected 9 fields, got {}: `{line}`", f.len())));
            }
            rows.push(ResultRow {
                setting: f[0].to_string(),
                task: f[1].to_string(),
                trials: f[2].parse().map_err(|_| EvalError::Parse(format!("bad trials `{}`", f[2])))?,
                success_rate: parse_cell(f[3])?,
                mean_steps: parse_cell(f[4])?,
                mean_expert_steps: parse_cell(f[5])?,
                mean_expert_fraction: parse_cell(f[6])?,
                mean_ticks: parse_cell(f[7])?,
                success_mean_steps: parse_cell(f[8])?,
            });
        }
        Ok(Self { rows })
    }

    /// Fixed-width human-readable rendering.
    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.3}"));
        let mut out = format!(
            "{:<12} {:<13} {:>6} {:>8} {:>8} {:>8} {:>8} {:>9}\n",
            "setting", "task", "trials", "success", "steps", "expert", "frac", "ticks"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<12} {:<13} {:>6} {:>8} {:>8} {:>8} {:>8} {:>9}",
                r.setting,
                r.task,
                r.trials,
                fmt(r.success_rate),
                fmt(r.mean_steps),
                fmt(r.mean_expert_steps),
                fmt(r.mean_expert_fraction),
                fmt(r.mean_ticks)
            );
        }
        out
    }
}

/// Structured summary document written next to the CSV table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub run_id: String,
    pub table: ResultTable,
    #[serde(default)]
    pub workload: Option<WorkloadReport>,
    #[serde(default)]
    pub curve: Option<LearningCurve>,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        serde_json::from_str(text).map_err(|e| EvalError::Parse(e.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Workload and learning curves
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadReport {
    pub reference_expert_steps: f64,
    pub collab_expert_steps: f64,
    /// `1 - collab / reference` expert steps.
    pub reduction: f64,
}

/// Expert workload reduction of `collab` relative to `reference`
/// (normally the expert-only setting over the same suite).
pub fn workload_report(reference: &[EpisodeRecord], collab: &[EpisodeRecord]) -> Option<WorkloadReport> {
    let r = mean(reference.iter().map(|e| e.expert_steps as f64))?;
    let c = mean(collab.iter().map(|e| e.expert_steps as f64))?;
    if r == 0.0 {
        return None;
    }
    Some(WorkloadReport { reference_expert_steps: r, collab_expert_steps: c, reduction: 1.0 - c / r })
}

/// Pearson correlation; `None` when either series has zero variance or the
/// lengths differ or are below 2.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Per-round measurement for a learning curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundPoint {
    pub round: u32,
    pub success: f64,
    pub steps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub points: Vec<RoundPoint>,
    /// Serialized as null when undefined.
    pub success_vs_round: Option<f64>,
    pub steps_vs_round: Option<f64>,
    pub diagnostics: Vec<String>,
}

impl LearningCurve {
    /// NaN sentinel when the correlation is undefined.
    pub fn success_r(&self) -> f64 {
        self.success_vs_round.unwrap_or(f64::NAN)
    }

    pub fn steps_r(&self) -> f64 {
        self.steps_vs_round.unwrap_or(f64::NAN)
    }
}

pub fn learning_curve(points: &[RoundPoint]) -> LearningCurve {
    let rounds: Vec<f64> = points.iter().map(|p| p.round as f64).collect();
    let success: Vec<f64> = points.iter().map(|p| p.success).collect();
    let steps: Vec<f64> = points.iter().map(|p| p.steps).collect();
    let mut diagnostics = Vec::new();
    let mut corr = |name: &str, ys: &[f64]| {
        let r = pearson(&rounds, ys);
        if r.is_none() {
            diagnostics.push(if points.len() < 2 {
                format!("{name}: need at least 2 rounds, got {}", points.len())
            } else {
                format!("{name}: zero variance, correlation undefined")
            });
        }
        r
    };
    let success_vs_round = corr("success", &success);
    let steps_vs_round = corr("steps", &steps);
    LearningCurve { points: points.to_vec(), success_vs_round, steps_vs_round, diagnostics }
}

// ---------------------------------------------------------------------------
// Trajectory log
// ---------------------------------------------------------------------------

/// One line of the trajectory log. Field order is fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub run_id: String,
    pub episode: u64,
    pub step: u32,
    pub task: String,
    pub seed: u64,
    pub actor: Actor,
    pub action: [f64; 3],
    pub success: bool,
    pub setting: String,
    pub ticks: u64,
    pub augmented: bool,
}

/// Writes records as JSON lines, numbering episodes in record order.
pub fn write_log<W: Write>(mut w: W, run_id: &str, records: &[EpisodeRecord]) -> Result<(), EvalError> {
    for (ep, r) in records.iter().enumerate() {
        for s in &r.steps {
            let line = LogLine {
                run_id: run_id.to_string(),
                episode: ep as u64,
                step: s.step,
                task: r.task.name().to_string(),
                seed: r.seed,
                actor: s.actor,
                action: s.action.to_array(),
                success: s.success,
                setting: r.schedule.label(),
                ticks: s.ticks,
                augmented: r.augmented,
            };
            writeln!(w, "{}", serde_json::to_string(&line).expect("serializable"))?;
        }
    }
    Ok(())
}

pub fn read_log<R: BufRead>(r: R) -> Result<Vec<LogLine>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| EvalError::Parse(format!("log line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// Rebuilds episode records (without observations) from log lines.
pub fn records_from_log(lines: &[LogLine]) -> Result<Vec<EpisodeRecord>, EvalError> {
    let mut out: Vec<(u64, EpisodeRecord)> = Vec::new();
    for l in lines {
        let task = TaskId::from_name(&l.task).map_err(|e| EvalError::Parse(e.to_string()))?;
        let schedule = Schedule::parse(&l.setting).ok_or_else(|| EvalError::Parse(format!("bad setting `{}`", l.setting)))?;
        if out.last().map(|(e, _)| *e) != Some(l.episode) {
            out.push((
                l.episode,
                EpisodeRecord { task, seed: l.seed, schedule, steps: Vec::new(), success: false, expert_steps: 0, ticks: 0, augmented: l.augmented },
            ));
        }
        let rec = &mut out.last_mut().expect("pushed above").1;
        let action = Action::from_array(l.action).map_err(|e| EvalError::Parse(e.to_string()))?;
        rec.steps.push(StepRecord { step: l.step, actor: l.actor, obs: Vec::new(), action, ticks: l.ticks, success: l.success });
        rec.success |= l.success;
        rec.ticks += l.ticks;
        if l.actor == Actor::Expert {
            rec.expert_steps += 1;
        }
    }
    Ok(out.into_iter().map(|(_, r)| r).collect())
}
