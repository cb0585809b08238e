//! JSON messages exchanged over the session socket.

use anmpc::dynamics::{RobotState, VelocityCommand};
use anmpc::simulation::EpisodeMetrics;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Running,
    Paused,
    Finished,
}

/// Client to server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ClientMsg {
    Hello { session: String },
    Cmd { v: f64, omega: f64, seq: u64 },
    Set { key: String, value: serde_json::Value },
    Reset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl From<RobotState> for Pose {
    fn from(s: RobotState) -> Self {
        Self {
            x: s.px,
            y: s.py,
            yaw: s.yaw,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Command {
    pub v: f64,
    pub omega: f64,
}

impl From<VelocityCommand> for Command {
    fn from(u: VelocityCommand) -> Self {
        Self {
            v: u.v,
            omega: u.omega,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverInfo {
    pub iters: usize,
    pub time_ms: f64,
    /// Solves discarded for running past the deadline, since session start.
    pub overruns: usize,
}

/// Telemetry for one tick, or a snapshot of a paused session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFrame {
    pub session_id: String,
    pub seq: u64,
    pub tick: u64,
    pub t: f64,
    pub robot: Pose,
    #[serde(rename = "uH")]
    pub u_h: Command,
    #[serde(rename = "uH_pred")]
    pub u_h_pred: Command,
    #[serde(rename = "uR")]
    pub u_r: Command,
    pub u_applied: Command,
    pub lambda: f64,
    pub lambda_effective: f64,
    pub theta_hat: [f64; 5],
    pub h_min: Option<f64>,
    pub psi_min: Option<f64>,
    pub goal: Pose,
    pub obstacles_digest: String,
    pub horizon: Vec<Point>,
    pub solver: SolverInfo,
    pub mode: Mode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultFrame {
    pub session_id: String,
    pub seq: u64,
    pub metrics: EpisodeMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub session_id: String,
    /// Per-connection reply counter.
    pub seq: u64,
    /// Message type being acknowledged.
    pub of: String,
    pub client_seq: Option<u64>,
    pub dropped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorFrame {
    pub session_id: Option<String>,
    pub seq: u64,
    pub code: String,
    pub message: String,
}

/// Server to client. `state` and `result` share the session's gap-free counter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ServerMsg {
    State(StateFrame),
    Result(ResultFrame),
    Ack(Ack),
    Error(ErrorFrame),
}

impl ServerMsg {
    pub fn session_id(&self) -> Option<&str> {
        match self {
            Self::State(f) => Some(&f.session_id),
            Self::Result(f) => Some(&f.session_id),
            Self::Ack(a) => Some(&a.session_id),
            Self::Error(e) => e.session_id.as_deref(),
        }
    }

    pub fn seq(&self) -> u64 {
        match self {
            Self::State(f) => f.seq,
            Self::Result(f) => f.seq,
            Self::Ack(a) => a.seq,
            Self::Error(e) => e.seq,
        }
    }
}
