//! Euler-discretized unicycle in input-affine form `x⁺ = a(x) + B(x) u`.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix3x2, Vector2, Vector3};
use serde::{Deserialize, Serialize};

/// Planar pose of the robot.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RobotState {
    #[serde(rename = "x")]
    pub px: f64,
    #[serde(rename = "y")]
    pub py: f64,
    pub yaw: f64,
}

impl RobotState {
    pub const fn new(px: f64, py: f64, yaw: f64) -> Self {
        Self { px, py, yaw }
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.px, self.py, self.yaw)
    }

    pub fn position(self) -> Vector2<f64> {
        Vector2::new(self.px, self.py)
    }

    /// Same pose with yaw wrapped to (−π, π].
    pub fn canonical(self) -> Self {
        Self::new(self.px, self.py, wrap_angle(self.yaw))
    }

    pub fn is_finite(self) -> bool {
        self.px.is_finite() && self.py.is_finite() && self.yaw.is_finite()
    }
}

/// Linear and angular velocity pair.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VelocityCommand {
    pub v: f64,
    pub omega: f64,
}

impl VelocityCommand {
    pub const ZERO: Self = Self { v: 0.0, omega: 0.0 };

    pub const fn new(v: f64, omega: f64) -> Self {
        Self { v, omega }
    }

    pub fn from_vector(v: &Vector2<f64>) -> Self {
        Self::new(v[0], v[1])
    }

    pub fn to_vector(self) -> Vector2<f64> {
        Vector2::new(self.v, self.omega)
    }

    pub fn norm(self) -> f64 {
        self.v.hypot(self.omega)
    }

    pub fn is_finite(self) -> bool {
        self.v.is_finite() && self.omega.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicsConfig {
    /// Sampling period in seconds.
    pub ts: f64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        Self { ts: 0.1 }
    }
}

/// Wraps an angle to (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Shortest signed angle from `to` to `from`, in (−π, π].
pub fn angle_diff(from: f64, to: f64) -> f64 {
    wrap_angle(from - to)
}

/// The drift term a(x). Identity for the Euler-discretized unicycle.
pub fn drift(x: RobotState) -> RobotState {
    x
}

/// B(x) for sampling period `ts`.
pub fn input_matrix(x: RobotState, ts: f64) -> Matrix3x2<f64> {
    let (s, c) = x.yaw.sin_cos();
    Matrix3x2::new(ts * c, 0.0, ts * s, 0.0, 0.0, ts)
}

/// One step without yaw wrapping. The optimizer works on continuous yaw.
pub fn step_vector(x: &Vector3<f64>, u: &Vector2<f64>, ts: f64) -> Vector3<f64> {
    let (s, c) = x[2].sin_cos();
    Vector3::new(x[0] + ts * c * u[0], x[1] + ts * s * u[0], x[2] + ts * u[1])
}

/// ∂f/∂x of the unwrapped step.
pub fn state_jacobian(x: &Vector3<f64>, u: &Vector2<f64>, ts: f64) -> Matrix3<f64> {
    let (s, c) = x[2].sin_cos();
    Matrix3::new(
        1.0,
        0.0,
        -ts * s * u[0],
        0.0,
        1.0,
        ts * c * u[0],
        0.0,
        0.0,
        1.0,
    )
}

/// Propagates the pose one sampling period; yaw is re-canonicalized.
pub fn step(x: RobotState, u: VelocityCommand, cfg: &DynamicsConfig) -> RobotState {
    let next = drift(x).to_vector() + input_matrix(x, cfg.ts) * u.to_vector();
    RobotState::from_vector(&next).canonical()
}

/// Distance between two poses with the yaw component measured the short way round.
pub fn pose_defect(a: RobotState, b: RobotState) -> f64 {
    let dx = a.px - b.px;
    let dy = a.py - b.py;
    let dyaw = angle_diff(a.yaw, b.yaw);
    (dx * dx + dy * dy + dyaw * dyaw).sqrt()
}
