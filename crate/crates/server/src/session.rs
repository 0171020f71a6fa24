//! Session state shared between connection workers and the episode loop.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::Sender;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use collabarm_core::arbiter::{
    run_episode_observed, Actor, Agent, ArbiterConfig, ArbiterError, EpisodeRecord, Schedule, StepObserver, StepRecord,
};
use collabarm_core::env::{Env, TaskId, WorldState};
use collabarm_core::eval::write_log;
use collabarm_core::expert::{Command, ExpertContext, ExpertError, HumanExpert, HumanLink, HumanReply, TimeoutPolicy};
use collabarm_core::obs::ObsMode;

use crate::protocol::{command_names, Role, Scene, ServerBody, ServerFrame, TurnState, PROTOCOL};

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub addr: String,
    /// Display rate for policy steps; 0 disables throttling.
    pub steps_per_second: f64,
    pub heartbeat: Duration,
    pub heartbeat_misses: u32,
    pub human_timeout: Duration,
    pub on_timeout: TimeoutPolicy,
    pub max_prompts: Option<u32>,
    /// Default interleave ratio for episodes started without a setting.
    pub n: u32,
    pub failure_threshold: u32,
    pub obs_mode: ObsMode,
    pub history: usize,
    pub run_id: String,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8765".into(),
            steps_per_second: 10.0,
            heartbeat: Duration::from_secs(2),
            heartbeat_misses: 3,
            human_timeout: Duration::from_secs(30),
            on_timeout: TimeoutPolicy::Reprompt,
            max_prompts: None,
            n: 4,
            failure_threshold: collabarm_core::env::FAILURE_THRESHOLD,
            obs_mode: ObsMode::StateVector,
            history: 1,
            run_id: "session".into(),
        }
    }
}

/// Registry of sessions plus what episodes need to run.
pub struct Hub {
    pub cfg: ServerConfig,
    pub env: Env,
    pub agent: Option<Agent>,
    sessions: Mutex<BTreeMap<String, Arc<Session>>>,
    next_session: AtomicU64,
    next_client: AtomicU64,
    seq: AtomicU64,
    stop: AtomicBool,
    records: Mutex<Vec<EpisodeRecord>>,
    log_path: Option<PathBuf>,
}

impl Hub {
    pub fn new(cfg: ServerConfig, env: Env, agent: Option<Agent>) -> Self {
        Self {
            cfg,
            env,
            agent,
            sessions: Mutex::new(BTreeMap::new()),
            next_session: AtomicU64::new(1),
            next_client: AtomicU64::new(1),
            seq: AtomicU64::new(1),
            stop: AtomicBool::new(false),
            records: Mutex::new(Vec::new()),
            log_path: None,
        }
    }

    /// Completed episodes are appended to this trajectory log.
    pub fn with_log(mut self, path: PathBuf) -> Self {
        self.log_path = Some(path);
        self
    }

    pub fn create_session(&self) -> Arc<Session> {
        let id = format!("s{}", self.next_session.fetch_add(1, Ordering::Relaxed));
        let s = Arc::new(Session::new(id.clone(), Schedule::Interleave(self.cfg.n)));
        lock(&self.sessions).insert(id, s.clone());
        s
    }

    pub fn session(&self, id: &str) -> Option<Arc<Session>> {
        lock(&self.sessions).get(id).cloned()
    }

    pub fn records(&self) -> Vec<EpisodeRecord> {
        lock(&self.records).clone()
    }

    pub fn shutdown(&self) {
        self.stop.store(true, Ordering::SeqCst);
        for s in lock(&self.sessions).values() {
            s.cv.notify_all();
        }
    }

    pub fn stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    pub(crate) fn client_id(&self) -> u64 {
        self.next_client.fetch_add(1, Ordering::Relaxed)
    }

    pub(crate) fn next_seq(&self) -> u64 {
        self.seq.fetch_add(1, Ordering::SeqCst)
    }

    fn default_setting(&self) -> Schedule {
        if self.agent.is_some() {
            Schedule::Interleave(self.cfg.n)
        } else {
            Schedule::ExpertOnly
        }
    }

    fn record(&self, r: EpisodeRecord) {
        let mut records = lock(&self.records);
        records.push(r);
        if let Some(path) = &self.log_path {
            let mut buf = Vec::new();
            if write_log(&mut buf, &self.cfg.run_id, &records).is_ok() {
                if let Err(e) = fs::write(path, buf) {
                    log::error!("cannot write {}: {e}", path.display());
                }
            }
        }
    }

    /// Expert whose every decision is a turn on `session`.
    pub fn human_expert(self: &Arc<Self>, session: &Arc<Session>) -> HumanExpert<SessionLink> {
        HumanExpert {
            link: SessionLink { hub: self.clone(), session: session.clone() },
            timeout: self.cfg.human_timeout,
            on_timeout: self.cfg.on_timeout,
            max_prompts: self.cfg.max_prompts,
        }
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

fn unix_ms(t: SystemTime) -> u64 {
    t.duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

pub struct Session {
    pub id: String,
    inner: Mutex<Inner>,
    cv: Condvar,
}

struct Inner {
    clients: BTreeMap<u64, Sender<String>>,
    controller: Option<u64>,
    turn_state: TurnState,
    /// Id of the current or most recent turn.
    turn: u64,
    /// Latest turn that has a command.
    answered: u64,
    pending: Option<Command>,
    announced: bool,
    abort: Option<String>,
    running: bool,
    episode: u64,
    setting: Schedule,
    last_state: Option<ServerBody>,
}

impl Session {
    fn new(id: String, setting: Schedule) -> Self {
        Self {
            id,
            inner: Mutex::new(Inner {
                clients: BTreeMap::new(),
                controller: None,
                turn_state: TurnState::Idle,
                turn: 0,
                answered: 0,
                pending: None,
                announced: false,
                abort: None,
                running: false,
                episode: 0,
                setting,
                last_state: None,
            }),
            cv: Condvar::new(),
        }
    }

    pub fn turn_state(&self) -> TurnState {
        lock(&self.inner).turn_state
    }

    pub fn has_controller(&self) -> bool {
        lock(&self.inner).controller.is_some()
    }

    fn frame(&self, hub: &Hub, body: ServerBody) -> String {
        ServerFrame { session: self.id.clone(), seq: hub.next_seq(), body }.to_text()
    }

    fn broadcast_locked(&self, hub: &Hub, inner: &mut Inner, body: ServerBody) {
        let text = self.frame(hub, body);
        inner.clients.retain(|_, tx| tx.send(text.clone()).is_ok());
    }

    pub(crate) fn send_to(&self, hub: &Hub, client: u64, body: ServerBody) {
        let inner = lock(&self.inner);
        if let Some(tx) = inner.clients.get(&client) {
            let _ = tx.send(self.frame(hub, body));
        }
    }

    /// Registers a client, greets it and replays the latest state.
    pub(crate) fn join(&self, hub: &Hub, client: u64, tx: Sender<String>, want: Option<Role>) -> Role {
        let mut inner = lock(&self.inner);
        let (role, notice) = match want {
            Some(Role::Observer) => (Role::Observer, None),
            _ if inner.controller.is_none() => {
                inner.controller = Some(client);
                (Role::Controller, None)
            }
            _ => (Role::Observer, Some("session already has a controller; joined as observer-only".to_string())),
        };
        let hello = ServerBody::Hello {
            protocol: PROTOCOL.into(),
            role,
            turn_state: inner.turn_state,
            setting: inner.setting.label(),
            commands: command_names(),
            tasks: TaskId::ALL.iter().map(|t| t.name().to_string()).collect(),
            heartbeat_ms: hub.cfg.heartbeat.as_millis() as u64,
            notice,
        };
        let _ = tx.send(self.frame(hub, hello));
        if let Some(state) = inner.last_state.clone() {
            let _ = tx.send(self.frame(hub, state));
        }
        inner.clients.insert(client, tx);
        if role == Role::Controller {
            // A paused turn is re-announced to the new controller.
            inner.announced = false;
            self.cv.notify_all();
        }
        role
    }

    pub(crate) fn leave(&self, client: u64) {
        let mut inner = lock(&self.inner);
        inner.clients.remove(&client);
        if inner.controller == Some(client) {
            inner.controller = None;
            inner.announced = false;
            log::info!("session {}: controller left; expert turns pause until it reconnects", self.id);
        }
        self.cv.notify_all();
    }

    pub(crate) fn handle_action(&self, hub: &Hub, client: u64, ref_seq: u64, command: &str, turn: Option<u64>) {
        let mut inner = lock(&self.inner);
        let reply = |reason: String| ServerBody::Reject { ref_seq: Some(ref_seq), reason };
        let body = if inner.controller != Some(client) {
            reply("observer-only client; commands are not accepted".into())
        } else if let Some(cmd) = Command::parse(command) {
            let awaiting = inner.turn_state == TurnState::AwaitingExpert;
            let target = turn.unwrap_or(inner.turn);
            if awaiting && target == inner.turn {
                if inner.pending.is_some() || inner.answered == inner.turn {
                    ServerBody::Ack {
                        ref_seq,
                        turn: target,
                        command: cmd.name().into(),
                        applied: false,
                        notice: Some(format!("turn {target} already has a command; dropped")),
                    }
                } else {
                    inner.pending = Some(cmd);
                    inner.answered = target;
                    self.cv.notify_all();
                    ServerBody::Ack { ref_seq, turn: target, command: cmd.name().into(), applied: true, notice: None }
                }
            } else if turn.is_some_and(|t| t > 0 && t <= inner.answered) {
                ServerBody::Ack {
                    ref_seq,
                    turn: target,
                    command: cmd.name().into(),
                    applied: false,
                    notice: Some(format!("turn {target} already has a command; dropped")),
                }
            } else if awaiting {
                reply(format!("stale turn {target}; the open turn is {}", inner.turn))
            } else {
                reply(format!("not awaiting an expert command (turn state: {})", turn_label(inner.turn_state)))
            }
        } else {
            reply(format!("unknown command `{command}`; expected one of {}", command_names().join(", ")))
        };
        if let Some(tx) = inner.clients.get(&client) {
            let _ = tx.send(self.frame(hub, body));
        }
    }

    pub(crate) fn handle_abort(&self, hub: &Hub, client: u64, ref_seq: u64, reason: Option<String>) {
        let mut inner = lock(&self.inner);
        let reject = if inner.controller != Some(client) {
            Some("observer-only client; abort is not accepted")
        } else if !inner.running && matches!(inner.turn_state, TurnState::Idle | TurnState::Terminal) {
            Some("no episode is running")
        } else {
            None
        };
        match reject {
            Some(r) => {
                if let Some(tx) = inner.clients.get(&client) {
                    let _ = tx.send(self.frame(hub, ServerBody::Reject { ref_seq: Some(ref_seq), reason: r.into() }));
                }
            }
            None => {
                inner.abort = Some(reason.unwrap_or_else(|| "aborted by the controller".into()));
                self.cv.notify_all();
            }
        }
    }

    /// Validates and launches an episode on a worker thread.
    pub(crate) fn handle_start(
        self: &Arc<Self>,
        hub: &Arc<Hub>,
        client: u64,
        ref_seq: u64,
        task: &str,
        seed: u64,
        setting: Option<&str>,
    ) {
        let mut inner = lock(&self.inner);
        let checked = (|| {
            if inner.controller != Some(client) {
                return Err("observer-only client; start is not accepted".to_string());
            }
            if inner.running {
                return Err("an episode is already running in this session".to_string());
            }
            let task = TaskId::from_name(task).map_err(|e| e.to_string())?;
            let schedule = match setting {
                Some(s) => Schedule::parse(s).ok_or_else(|| format!("unknown setting `{s}`"))?,
                None => hub.default_setting(),
            };
            if schedule.needs_policy() && hub.agent.is_none() {
                return Err("no policy checkpoint is loaded; only expert-only episodes can run".to_string());
            }
            Ok((task, schedule))
        })();
        let (task, schedule) = match checked {
            Ok(v) => v,
            Err(reason) => {
                if let Some(tx) = inner.clients.get(&client) {
                    let _ = tx.send(self.frame(hub, ServerBody::Reject { ref_seq: Some(ref_seq), reason }));
                }
                return;
            }
        };
        inner.running = true;
        inner.abort = None;
        inner.episode += 1;
        inner.setting = schedule;
        inner.pending = None;
        let episode = inner.episode;
        let reset = hub.env.reset(task, seed);
        let start = ServerBody::Start {
            episode,
            task: task.name().into(),
            seed,
            setting: schedule.label(),
            spec: hub.env.spec(task).clone(),
        };
        self.broadcast_locked(hub, &mut inner, start);
        self.publish_state_locked(hub, &mut inner, &reset, None, TurnState::PolicyRunning);
        drop(inner);
        let (hub, session) = (hub.clone(), self.clone());
        thread::spawn(move || session.run_episode(&hub, task, seed, schedule, episode));
    }

    fn publish_state_locked(
        &self,
        hub: &Hub,
        inner: &mut Inner,
        state: &WorldState,
        actor: Option<Actor>,
        turn_state: TurnState,
    ) {
        inner.turn_state = turn_state;
        let body = ServerBody::State {
            episode: inner.episode,
            step: state.step_count,
            actor,
            scene: Scene::from_state(state),
            success: state.success,
            turn_state,
        };
        inner.last_state = Some(body.clone());
        self.broadcast_locked(hub, inner, body);
    }

    fn run_episode(self: &Arc<Self>, hub: &Arc<Hub>, task: TaskId, seed: u64, schedule: Schedule, episode: u64) {
        let cfg = ArbiterConfig {
            schedule,
            failure_threshold: hub.cfg.failure_threshold,
            obs_mode: hub.cfg.obs_mode,
            history: hub.cfg.history,
        };
        let expert = hub.human_expert(self);
        let mut publisher = Publisher { hub: hub.clone(), session: self.clone(), schedule };
        let result = run_episode_observed(&hub.env, hub.agent.as_ref(), &expert, task, seed, &cfg, &mut publisher);
        let mut inner = lock(&self.inner);
        inner.running = false;
        inner.turn_state = TurnState::Terminal;
        let body = match &result {
            Ok(r) => ServerBody::Result {
                episode,
                success: r.success,
                steps: r.total_steps(),
                expert_steps: r.expert_steps,
                ticks: r.ticks,
                error: None,
            },
            Err(ArbiterError::Aborted | ArbiterError::Expert(ExpertError::Aborted)) => {
                let reason = inner.abort.take().unwrap_or_else(|| "aborted".into());
                ServerBody::Abort { episode, reason }
            }
            Err(e) => ServerBody::Result { episode, success: false, steps: 0, expert_steps: 0, ticks: 0, error: Some(e.to_string()) },
        };
        self.broadcast_locked(hub, &mut inner, body);
        drop(inner);
        if let Ok(r) = result {
            hub.record(r);
        }
    }
}

fn turn_label(t: TurnState) -> &'static str {
    match t {
        TurnState::Idle => "idle",
        TurnState::PolicyRunning => "policy-running",
        TurnState::AwaitingExpert => "awaiting-expert",
        TurnState::Terminal => "terminal",
    }
}

/// Streams a state frame per step and throttles policy steps.
struct Publisher {
    hub: Arc<Hub>,
    session: Arc<Session>,
    schedule: Schedule,
}

impl StepObserver for Publisher {
    fn on_step(&mut self, state: &WorldState, record: &StepRecord) -> bool {
        let next = if state.success || state.step_count >= self.hub.cfg.failure_threshold {
            TurnState::Terminal
        } else {
            match self.schedule.actor(state.step_count + 1) {
                Actor::Policy => TurnState::PolicyRunning,
                Actor::Expert => TurnState::AwaitingExpert,
            }
        };
        {
            let mut inner = lock(&self.session.inner);
            if inner.abort.is_some() || self.hub.stopped() {
                return false;
            }
            // Awaiting is entered by the link itself when the request is posted.
            let shown = if next == TurnState::AwaitingExpert { TurnState::PolicyRunning } else { next };
            self.session.publish_state_locked(&self.hub, &mut inner, state, Some(record.actor), shown);
        }
        let sps = self.hub.cfg.steps_per_second;
        if record.actor == Actor::Policy && sps > 0.0 {
            thread::sleep(Duration::from_secs_f64(1.0 / sps));
        }
        true
    }
}

/// [`HumanLink`] over a session: each request is one expert turn.
pub struct SessionLink {
    hub: Arc<Hub>,
    session: Arc<Session>,
}

impl HumanLink for SessionLink {
    fn request(&self, state: &WorldState, ctx: &ExpertContext, timeout: Duration) -> HumanReply {
        let s = &self.session;
        let mut inner = lock(&s.inner);
        inner.turn += 1;
        inner.turn_state = TurnState::AwaitingExpert;
        inner.pending = None;
        inner.announced = false;
        let turn = inner.turn;
        let mut deadline = Instant::now() + timeout;
        loop {
            if inner.abort.is_some() || self.hub.stopped() {
                inner.turn_state = TurnState::PolicyRunning;
                return HumanReply::Abort;
            }
            if let Some(cmd) = inner.pending.take() {
                inner.turn_state = TurnState::PolicyRunning;
                log::debug!("session {}: turn {turn} answered with {cmd}", s.id);
                return HumanReply::Command(cmd);
            }
            if inner.controller.is_none() {
                // Paused: the clock restarts when a controller is back.
                inner = s.cv.wait_timeout(inner, Duration::from_millis(100)).unwrap_or_else(|p| p.into_inner()).0;
                continue;
            }
            if !inner.announced {
                inner.announced = true;
                deadline = Instant::now() + timeout;
                let body = ServerBody::ActionRequest {
                    episode: inner.episode,
                    turn,
                    step: ctx.step,
                    timeout_ms: timeout.as_millis() as u64,
                    deadline_ms: unix_ms(SystemTime::now() + timeout),
                    scene: Scene::from_state(state),
                    commands: command_names(),
                };
                s.broadcast_locked(&self.hub, &mut inner, body);
            }
            let now = Instant::now();
            if now >= deadline {
                inner.turn_state = TurnState::PolicyRunning;
                return HumanReply::Timeout;
            }
            let wait = (deadline - now).min(Duration::from_millis(100));
            inner = s.cv.wait_timeout(inner, wait).unwrap_or_else(|p| p.into_inner()).0;
        }
    }
}

impl ServerConfig {
    /// Server settings from a run configuration.
    pub fn from_run(cfg: &collabarm_core::config::RunConfig) -> Self {
        let secs = |s: f64| Duration::from_secs_f64(s.max(0.0));
        Self {
            addr: cfg.server.addr.clone(),
            steps_per_second: cfg.server.steps_per_second,
            heartbeat: secs(cfg.server.heartbeat_s),
            heartbeat_misses: cfg.server.heartbeat_misses,
            human_timeout: secs(cfg.expert.human_timeout_s),
            on_timeout: cfg.expert.on_timeout,
            max_prompts: (cfg.expert.max_prompts > 0).then_some(cfg.expert.max_prompts),
            n: cfg.arbiter.n,
            failure_threshold: cfg.arbiter.failure_threshold,
            obs_mode: cfg.policy.obs_mode,
            history: cfg.policy.history,
            run_id: cfg.run.run_id.clone(),
        }
    }
}
