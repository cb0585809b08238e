//! CBF-constrained NMPC over the blended dynamics.
//!
//! The decision variables are the predicted states, robot inputs, predicted
//! human inputs and one CBF slack per step:
//!
//! ```text
//! min  ‖x_N − x^ref_N‖²_P + Σ_k ‖x_k − x^ref_k‖²_Q + ‖uR_k‖²_RR + ‖uH_k‖²_RH + w δ_k²
//! s.t. x_0 = x(t)
//!      x_{k+1} = x_k + B(x_k)(λ uR_k + (1 − λ) uH_k)
//!      φ(x_k, uH_k, θ̂) = 0
//!      ψ(x_k, λ uR_k + (1 − λ) uH_k) ≥ δ_k·1
//!      uR_k ∈ U^R
//! ```

mod sqp;
mod transcription;

use serde::{Deserialize, Serialize};

use crate::dynamics::{DynamicsConfig, RobotState, VelocityCommand};
use crate::error::{Error, Result};
use crate::human_model::GoalPose;
use crate::safety::BarrierConfig;

pub use sqp::solve;
pub use transcription::{transcribe, BlockSparsity, Nlp, NlpLayout, Residuals};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputBounds {
    pub v_max: f64,
    pub omega_max: f64,
}

impl Default for InputBounds {
    fn default() -> Self {
        Self {
            v_max: 0.4,
            omega_max: 0.8,
        }
    }
}

/// Layout of the state reference over the horizon.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReferencePolicy {
    /// The goal pose at every knot.
    #[default]
    Constant,
    /// A straight line from the current position to the goal, travelled at
    /// `speed` m/s and headed along the line, then the goal pose.
    Interpolated { speed: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmpcConfig {
    pub horizon: usize,
    pub lambda: f64,
    pub q_r: [f64; 3],
    pub p_r: [f64; 3],
    pub r_r: [f64; 2],
    pub r_h: [f64; 2],
    pub slack_weight: f64,
    pub input_bounds: InputBounds,
    pub max_sqp_iters: usize,
    pub qp_tolerance: f64,
    pub dynamics: DynamicsConfig,
    pub barrier: BarrierConfig,
    #[serde(default)]
    pub reference: ReferencePolicy,
}

impl Default for NmpcConfig {
    fn default() -> Self {
        Self {
            horizon: 100,
            lambda: 0.35,
            q_r: [4.0, 4.0, 4.0],
            p_r: [40.0, 40.0, 40.0],
            r_r: [0.4, 0.2],
            r_h: [0.02, 0.02],
            slack_weight: 1e3,
            input_bounds: InputBounds::default(),
            max_sqp_iters: 10,
            qp_tolerance: 1e-8,
            dynamics: DynamicsConfig::default(),
            barrier: BarrierConfig::default(),
            reference: ReferencePolicy::Constant,
        }
    }
}

impl NmpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::validation("horizon", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::validation(
                "lambda",
                format!("must lie in [0, 1], got {}", self.lambda),
            ));
        }
        let weights = self
            .q_r
            .iter()
            .chain(&self.p_r)
            .chain(&self.r_r)
            .chain(&self.r_h);
        if weights.clone().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::validation(
                "weights",
                "every weight entry must be positive",
            ));
        }
        if !(self.slack_weight > 0.0 && self.slack_weight.is_finite()) {
            return Err(Error::validation("slack_weight", "must be positive"));
        }
        let b = &self.input_bounds;
        if !(b.v_max > 0.0 && b.omega_max >= 0.0) {
            return Err(Error::validation(
                "input_bounds",
                "need v_max > 0 and omega_max >= 0",
            ));
        }
        if !(self.dynamics.ts > 0.0) {
            return Err(Error::validation("ts", "must be positive"));
        }
        BarrierConfig::new(self.barrier.gamma)?;
        if let ReferencePolicy::Interpolated { speed } = self.reference {
            if !(speed > 0.0 && speed.is_finite()) {
                return Err(Error::validation("reference", "speed must be positive"));
            }
        }
        if self.max_sqp_iters == 0 {
            return Err(Error::validation("max_sqp_iters", "must be at least 1"));
        }
        Ok(())
    }

    /// Input actually applied to the plant model for a robot/human pair.
    pub fn blended(&self, u_r: VelocityCommand, u_h: VelocityCommand) -> VelocityCommand {
        let l = self.lambda;
        VelocityCommand::new(
            l * u_r.v + (1.0 - l) * u_h.v,
            l * u_r.omega + (1.0 - l) * u_h.omega,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonSolution {
    pub states: Vec<RobotState>,
    pub robot_inputs: Vec<VelocityCommand>,
    pub human_inputs: Vec<VelocityCommand>,
    pub slacks: Vec<f64>,
    pub sqp_iterations: usize,
    pub max_constraint_violation: f64,
    /// Wall-clock seconds.
    pub solve_time: f64,
    pub converged: bool,
    pub cost: f64,
}

impl HorizonSolution {
    pub fn horizon(&self) -> usize {
        self.robot_inputs.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTrajectory {
    pub poses: Vec<GoalPose>,
}

/// The goal held constant over all `n + 1` knots.
pub fn build_reference(goal: GoalPose, n: usize) -> ReferenceTrajectory {
    ReferenceTrajectory {
        poses: vec![goal; n + 1],
    }
}

/// Reference for a solve from `x0` under the configured policy.
pub fn reference_for(x0: RobotState, goal: GoalPose, cfg: &NmpcConfig) -> ReferenceTrajectory {
    let n = cfg.horizon;
    let ReferencePolicy::Interpolated { speed } = cfg.reference else {
        return build_reference(goal, n);
    };
    let (dx, dy) = (goal.gx - x0.px, goal.gy - x0.py);
    let dist = dx.hypot(dy);
    if dist < 1e-9 {
        return build_reference(goal, n);
    }
    let heading = dy.atan2(dx);
    let poses = (0..=n)
        .map(|k| {
            let s = k as f64 * cfg.dynamics.ts * speed;
            if s >= dist {
                goal
            } else {
                GoalPose::new(x0.px + s * dx / dist, x0.py + s * dy / dist, heading)
            }
        })
        .collect();
    ReferenceTrajectory { poses }
}

/// Shifts every trajectory one step left, repeating the last entry; the new final slack is 0.
pub fn warm_shift(prev: &HorizonSolution) -> HorizonSolution {
    fn shift<T: Copy>(v: &[T]) -> Vec<T> {
        match v.split_first() {
            Some((_, rest)) if !rest.is_empty() => {
                let mut out = rest.to_vec();
                out.push(*rest.last().expect("non-empty"));
                out
            }
            _ => v.to_vec(),
        }
    }
    let mut slacks: Vec<f64> = prev.slacks.iter().skip(1).copied().collect();
    if !prev.slacks.is_empty() {
        slacks.push(0.0);
    }
    HorizonSolution {
        states: shift(&prev.states),
        robot_inputs: shift(&prev.robot_inputs),
        human_inputs: shift(&prev.human_inputs),
        slacks,
        ..prev.clone()
    }
}

fn weighted_sq(e: &[f64], w: &[f64]) -> f64 {
    e.iter().zip(w).map(|(a, b)| a * a * b).sum()
}

/// Objective value of a trajectory; yaw errors are taken the short way round.
pub fn cost(solution: &HorizonSolution, reference: &ReferenceTrajectory, cfg: &NmpcConfig) -> f64 {
    let n = solution.robot_inputs.len();
    let mut total = 0.0;
    for k in 0..n {
        let e = reference.poses[k].error(&solution.states[k].to_vector());
        total += weighted_sq(e.as_slice(), &cfg.q_r);
        let ur = solution.robot_inputs[k];
        let uh = solution.human_inputs[k];
        total += weighted_sq(&[ur.v, ur.omega], &cfg.r_r);
        total += weighted_sq(&[uh.v, uh.omega], &cfg.r_h);
        total += cfg.slack_weight * solution.slacks[k] * solution.slacks[k];
    }
    let e = reference.poses[n].error(&solution.states[n].to_vector());
    total + weighted_sq(e.as_slice(), &cfg.p_r)
}
