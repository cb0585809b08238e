//! One live session: the closed loop paced by wall clock, fed by a latest-wins command slot.

use std::collections::HashMap;
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Mutex, RwLock};
use std::thread;
use std::time::{Duration, Instant};

use anmpc::dynamics::VelocityCommand;
use anmpc::safety::{h_values, min_or_none};
use anmpc::simulation::{ClosedLoop, Scenario, SimConfig, TickRecord, BUILTIN_SCENARIOS};
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::broadcast;

use crate::error::{Result, ServiceError};
use crate::protocol::{Command, Mode, Point, Pose, ResultFrame, ServerMsg, SolverInfo, StateFrame};

/// Host-wide timing knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServiceConfig {
    pub period: Duration,
    /// Commands older than this count as no input.
    pub command_timeout: Duration,
    /// Offset into the period at which a tick's telemetry is released.
    pub telemetry_phase: Duration,
    /// Default solve deadline in seconds for new sessions.
    pub solve_deadline: Option<f64>,
    /// Every how many horizon knots a pose is sent.
    pub horizon_stride: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            period: Duration::from_millis(100),
            command_timeout: Duration::from_millis(300),
            telemetry_phase: Duration::from_millis(60),
            solve_deadline: Some(0.1),
            horizon_stride: 5,
        }
    }
}

/// Fields a client may override when creating a session.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slack_weight: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duration_limit: Option<f64>,
    /// `null` turns the deadline off.
    #[serde(default, deserialize_with = "present", skip_serializing_if = "Option::is_none")]
    pub solve_deadline: Option<Option<f64>>,
}

fn present<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<Option<f64>>, D::Error> {
    Option::<f64>::deserialize(d).map(Some)
}

impl Overrides {
    pub fn apply(&self, base: SimConfig) -> Result<SimConfig> {
        let mut cfg = base;
        if let Some(l) = self.lambda {
            cfg = cfg.with_lambda(l);
        }
        if let Some(w) = self.slack_weight {
            cfg = cfg.with_slack_weight(w);
        }
        if let Some(d) = self.duration_limit {
            cfg.duration_limit = d;
        }
        if let Some(d) = self.solve_deadline {
            cfg.solve_deadline = d;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn digest(scenario: &Scenario) -> String {
    let json = serde_json::to_string(&scenario.obstacles).expect("obstacles serialize");
    Sha256::digest(json.as_bytes())[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// The synchronous part of a session: closed loop plus telemetry numbering.
#[derive(Debug, Clone)]
pub struct Session {
    id: String,
    cfg: SimConfig,
    sim: ClosedLoop,
    seq: u64,
    digest: String,
    stride: usize,
}

impl Session {
    pub fn new(id: impl Into<String>, scenario: Scenario, cfg: SimConfig, stride: usize) -> Result<Self> {
        let digest = digest(&scenario);
        Ok(Self {
            id: id.into(),
            sim: ClosedLoop::new(scenario, cfg)?,
            cfg,
            seq: 0,
            digest,
            stride: stride.max(1),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn sim(&self) -> &ClosedLoop {
        &self.sim
    }

    fn max_ticks(&self) -> u64 {
        (self.cfg.duration_limit / self.cfg.nmpc.dynamics.ts + 1e-9).floor() as u64
    }

    /// Goal reached or time limit spent.
    pub fn finished(&self) -> bool {
        self.sim.goal_reached() || self.sim.tick() >= self.max_ticks()
    }

    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        self.sim.set_lambda(lambda)?;
        self.cfg = *self.sim.config();
        Ok(())
    }

    /// Back to the start pose with a fresh estimate; the frame counter keeps running.
    pub fn reset(&mut self) {
        self.sim = ClosedLoop::new(self.sim.scenario().clone(), self.cfg).expect("validated at creation");
    }

    fn next_seq(&mut self) -> u64 {
        let s = self.seq;
        self.seq += 1;
        s
    }

    /// Runs one tick; a finishing tick also yields the result frame.
    pub fn step(&mut self, u_h: VelocityCommand) -> Vec<ServerMsg> {
        self.sim.step(u_h);
        let done = self.finished();
        let mut out = vec![self.frame(if done { Mode::Finished } else { Mode::Running })];
        if done {
            let seq = self.next_seq();
            out.push(ServerMsg::Result(ResultFrame {
                session_id: self.id.clone(),
                seq,
                metrics: self.sim.metrics(),
            }));
        }
        out
    }

    /// Current view without advancing.
    pub fn frame(&mut self, mode: Mode) -> ServerMsg {
        let sim = &self.sim;
        let scenario = sim.scenario();
        let last = sim.trace().last();
        let zero = Command::from(VelocityCommand::ZERO);
        let horizon = sim
            .plan()
            .map(|p| {
                p.states
                    .iter()
                    .step_by(self.stride)
                    .map(|s| Point { x: s.px, y: s.py })
                    .collect()
            })
            .unwrap_or_default();
        let g = scenario.goal;
        let mut frame = StateFrame {
            session_id: self.id.clone(),
            seq: 0,
            tick: sim.tick(),
            t: sim.time(),
            robot: sim.state().into(),
            u_h: last.map_or(zero, |r| r.u_h_meas.into()),
            u_h_pred: last.map_or(zero, |r| r.u_h_pred.into()),
            u_r: last.map_or(zero, |r| r.u_r.into()),
            u_applied: last.map_or(zero, |r| r.u_applied.into()),
            lambda: self.cfg.blend.lambda,
            lambda_effective: last.map_or(self.cfg.blend.lambda, |r| r.lambda_effective),
            theta_hat: sim.theta().to_array(),
            h_min: min_or_none(&h_values(sim.state(), &scenario.obstacles)),
            psi_min: last.and_then(|r| r.psi_min),
            goal: Pose {
                x: g.gx,
                y: g.gy,
                yaw: g.gyaw,
            },
            obstacles_digest: self.digest.clone(),
            horizon,
            solver: SolverInfo {
                iters: last.map_or(0, |r| r.solver.iters),
                time_ms: last.map_or(0.0, |r| r.solver.time * 1e3),
                overruns: sim.trace().iter().filter(|r| r.solver.overrun).count(),
            },
            mode,
        };
        frame.seq = self.next_seq();
        ServerMsg::State(frame)
    }
}

/// What the network side hands to the control loop.
#[derive(Debug)]
struct Inbox {
    mode: Mode,
    latest: Option<(VelocityCommand, Instant)>,
    last_client_seq: Option<u64>,
    pending_lambda: Option<f64>,
    reset: bool,
}

impl Inbox {
    fn new() -> Self {
        Self {
            mode: Mode::Paused,
            latest: None,
            last_client_seq: None,
            pending_lambda: None,
            reset: false,
        }
    }

    /// Returns whether the command was dropped as stale.
    fn ingest(&mut self, id: &str, u: VelocityCommand, client_seq: u64, now: Instant) -> Result<bool> {
        if self.mode != Mode::Running {
            return Err(ServiceError::SessionNotRunning(id.to_owned()));
        }
        if self.last_client_seq.is_some_and(|s| client_seq <= s) {
            return Ok(true);
        }
        self.last_client_seq = Some(client_seq);
        self.latest = Some((u, now));
        Ok(false)
    }

    fn command_at(&self, now: Instant, timeout: Duration) -> VelocityCommand {
        match self.latest {
            Some((u, at)) if now.saturating_duration_since(at) <= timeout => u,
            _ => VelocityCommand::ZERO,
        }
    }
}

struct Shared {
    inbox: Mutex<Inbox>,
    log: Mutex<Vec<TickRecord>>,
}

/// Network-side handle to a session running on its own thread.
pub struct SessionHandle {
    id: String,
    scenario: String,
    shared: Arc<Shared>,
    wake: Mutex<mpsc::Sender<()>>,
    frames: broadcast::Sender<ServerMsg>,
}

impl SessionHandle {
    pub fn spawn(session: Session, cfg: ServiceConfig) -> Self {
        let shared = Arc::new(Shared {
            inbox: Mutex::new(Inbox::new()),
            log: Mutex::new(Vec::new()),
        });
        let (wake, rx) = mpsc::channel();
        let (frames, _) = broadcast::channel(1024);
        let handle = Self {
            id: session.id().to_owned(),
            scenario: session.sim().scenario().name.clone(),
            shared: shared.clone(),
            wake: Mutex::new(wake),
            frames: frames.clone(),
        };
        thread::Builder::new()
            .name(format!("session-{}", handle.id))
            .spawn(move || control_loop(session, shared, rx, frames, cfg))
            .expect("spawn session thread");
        handle
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn scenario(&self) -> &str {
        &self.scenario
    }

    pub fn mode(&self) -> Mode {
        self.shared.inbox.lock().unwrap().mode
    }

    pub fn subscribe(&self) -> broadcast::Receiver<ServerMsg> {
        self.frames.subscribe()
    }

    fn wake(&self) {
        // The loop only exits once every handle is gone.
        let _ = self.wake.lock().unwrap().send(());
    }

    /// Asks the loop to publish a state frame now.
    pub fn request_snapshot(&self) {
        self.wake();
    }

    /// Latest-wins command ingestion. `Ok(true)` means dropped as out of order.
    pub fn command(&self, v: f64, omega: f64, client_seq: u64) -> Result<bool> {
        if !(v.is_finite() && omega.is_finite()) {
            return Err(ServiceError::InvalidValue("command must be finite".into()));
        }
        self.shared
            .inbox
            .lock()
            .unwrap()
            .ingest(&self.id, VelocityCommand::new(v, omega), client_seq, Instant::now())
    }

    pub fn set_lambda(&self, lambda: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(ServiceError::InvalidValue(format!("lambda {lambda} outside [0, 1]")));
        }
        self.shared.inbox.lock().unwrap().pending_lambda = Some(lambda);
        self.wake();
        Ok(())
    }

    pub fn set_paused(&self, paused: bool) -> Result<()> {
        {
            let mut inbox = self.shared.inbox.lock().unwrap();
            match (inbox.mode, paused) {
                (Mode::Finished, false) => return Err(ServiceError::SessionNotRunning(self.id.clone())),
                (Mode::Finished, true) => {}
                (_, true) => inbox.mode = Mode::Paused,
                (_, false) => inbox.mode = Mode::Running,
            }
        }
        self.wake();
        Ok(())
    }

    /// Returns to the start pose, paused.
    pub fn reset(&self) {
        {
            let mut inbox = self.shared.inbox.lock().unwrap();
            inbox.mode = Mode::Paused;
            inbox.latest = None;
            inbox.reset = true;
        }
        self.wake();
    }

    /// Ticks executed since the last reset.
    pub fn log(&self) -> Vec<TickRecord> {
        self.shared.log.lock().unwrap().clone()
    }
}

fn control_loop(
    mut session: Session,
    shared: Arc<Shared>,
    wake: mpsc::Receiver<()>,
    frames: broadcast::Sender<ServerMsg>,
    cfg: ServiceConfig,
) {
    let publish = |msgs: Vec<ServerMsg>| {
        for m in msgs {
            // No subscribers is fine.
            let _ = frames.send(m);
        }
    };
    let mut next: Option<Instant> = None;
    loop {
        let woke = match next {
            Some(at) => match wake.recv_timeout(at.saturating_duration_since(Instant::now())) {
                Ok(()) => true,
                Err(RecvTimeoutError::Timeout) => false,
                Err(RecvTimeoutError::Disconnected) => return,
            },
            None => match wake.recv() {
                Ok(()) => true,
                Err(_) => return,
            },
        };
        let (mode, lambda, reset) = {
            let mut inbox = shared.inbox.lock().unwrap();
            (inbox.mode, inbox.pending_lambda.take(), std::mem::take(&mut inbox.reset))
        };
        if reset {
            session.reset();
            shared.log.lock().unwrap().clear();
        }
        if let Some(l) = lambda {
            if let Err(e) = session.set_lambda(l) {
                log::warn!("session {}: {e}", session.id());
            }
        }
        if mode != Mode::Running {
            next = None;
        } else if next.is_none() {
            next = Some(Instant::now());
        }
        if woke {
            publish(vec![session.frame(mode)]);
            continue;
        }
        let Some(at) = next else { continue };

        let now = Instant::now();
        let u = shared.inbox.lock().unwrap().command_at(now, cfg.command_timeout);
        let msgs = session.step(u);
        let record = session.sim().trace().last().expect("just stepped").clone();
        if record.solver.overrun {
            log::warn!("session {}: solve overran at tick {}", session.id(), record.tick);
        }
        shared.log.lock().unwrap().push(record);
        if session.finished() {
            let mut inbox = shared.inbox.lock().unwrap();
            if inbox.mode == Mode::Running {
                inbox.mode = Mode::Finished;
            }
            next = None;
        } else {
            let after = Instant::now();
            next = Some((at + cfg.period).max(after));
        }
        let release = at + cfg.telemetry_phase;
        let now = Instant::now();
        if release > now {
            thread::sleep(release - now);
        }
        publish(msgs);
    }
}

/// All live sessions plus the scenarios they may be created from.
pub struct Registry {
    catalogue: Vec<Scenario>,
    cfg: ServiceConfig,
    sessions: RwLock<HashMap<String, Arc<SessionHandle>>>,
}

impl Registry {
    pub fn new(catalogue: Vec<Scenario>, cfg: ServiceConfig) -> Self {
        Self {
            catalogue,
            cfg,
            sessions: RwLock::new(HashMap::new()),
        }
    }

    /// The built-in scenarios.
    pub fn with_builtins(cfg: ServiceConfig) -> Self {
        let catalogue = BUILTIN_SCENARIOS
            .iter()
            .map(|n| Scenario::builtin(n).expect("built-in scenarios parse"))
            .collect();
        Self::new(catalogue, cfg)
    }

    pub fn scenarios(&self) -> &[Scenario] {
        &self.catalogue
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.cfg
    }

    /// Session configuration for the given overrides.
    pub fn session_config(&self, overrides: &Overrides) -> Result<SimConfig> {
        let base = SimConfig {
            solve_deadline: self.cfg.solve_deadline,
            ..SimConfig::default()
        };
        overrides.apply(base)
    }

    pub fn create(&self, scenario: &str, overrides: &Overrides) -> Result<Arc<SessionHandle>> {
        let sc = self
            .catalogue
            .iter()
            .find(|s| s.name == scenario)
            .ok_or_else(|| ServiceError::UnknownScenario(scenario.to_owned()))?
            .clone();
        let cfg = self.session_config(overrides)?;
        let id = uuid::Uuid::new_v4().simple().to_string();
        let session = Session::new(id.clone(), sc, cfg, self.cfg.horizon_stride)?;
        let handle = Arc::new(SessionHandle::spawn(session, self.cfg));
        self.sessions.write().unwrap().insert(id, handle.clone());
        Ok(handle)
    }

    pub fn get(&self, id: &str) -> Result<Arc<SessionHandle>> {
        self.sessions
            .read()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::UnknownSession(id.to_owned()))
    }
}
