//! Online estimation of the operator's value-function weights.
//!
//! The prediction error `J = ½ (ûH − uH)ᵀ Γ (ûH − uH)` is differentiated through
//! the stationarity condition `φ(x, ûH, θ̂) = 0`, giving
//! `∂ûH/∂θ̂ = −(∂φ/∂uH)⁻¹ ∂φ/∂θ̂`. One projected gradient step is taken per tick
//! while the operator is actively commanding.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::arbitration::Deadband;
use crate::dynamics::{DynamicsConfig, RobotState, VelocityCommand};
use crate::error::{Error, Result};
use crate::human_model::{
    GoalPose, HumanModel, IntentParams, ObstacleSet, ParamVector, EPSILON_THETA,
};

/// Where the predicted operator action comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionSource {
    /// First human input of the NMPC horizon.
    #[default]
    Nmpc,
    /// A separate rational-action solve at the current estimate.
    Fresh,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptationConfig {
    /// Diagonal of Γ in action space.
    pub gamma_weight: [f64; 2],
    pub mu: f64,
    pub theta_lower: [f64; 5],
    pub theta_upper: [f64; 5],
    pub deadband: Deadband,
    pub conditioning_limit: f64,
    /// Keep the planar goal weights equal.
    pub tied: bool,
    pub prediction_source: PredictionSource,
    /// Largest ‖φ‖ accepted at the linearization point without re-solving.
    pub stationarity_tolerance: f64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            gamma_weight: [0.01, 0.01],
            mu: 1.0,
            theta_lower: [EPSILON_THETA; 5],
            theta_upper: [100.0; 5],
            deadband: Deadband::default(),
            conditioning_limit: 1e8,
            tied: true,
            prediction_source: PredictionSource::Nmpc,
            stationarity_tolerance: 1e-4,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::validation("mu", "must be positive"));
        }
        if self.gamma_weight.iter().any(|g| !(*g >= 0.0)) {
            return Err(Error::validation("gamma_weight", "must be non-negative"));
        }
        for i in 0..5 {
            let (lo, hi) = (self.theta_lower[i], self.theta_upper[i]);
            if !(lo >= EPSILON_THETA && lo <= hi && hi.is_finite()) {
                return Err(Error::validation(
                    format!("theta_bounds[{i}]"),
                    format!("need {EPSILON_THETA} <= lower <= upper < inf, got [{lo}, {hi}]"),
                ));
            }
        }
        if !(self.conditioning_limit > 1.0) {
            return Err(Error::validation("conditioning_limit", "must exceed 1"));
        }
        Ok(())
    }

    fn gamma(&self) -> Matrix2<f64> {
        Matrix2::new(self.gamma_weight[0], 0.0, 0.0, self.gamma_weight[1])
    }

    pub fn contains(&self, theta: &IntentParams) -> bool {
        theta
            .to_array()
            .iter()
            .enumerate()
            .all(|(i, v)| *v >= self.theta_lower[i] && *v <= self.theta_upper[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    Deadband,
    SingularJacobian,
    DomainError,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptationRecord {
    pub theta_before: IntentParams,
    pub theta_after: IntentParams,
    pub predicted: VelocityCommand,
    pub measured: VelocityCommand,
    pub cost_j: f64,
    pub skipped: bool,
    pub skip_reason: SkipReason,
}

pub fn prediction_cost(
    predicted: VelocityCommand,
    measured: VelocityCommand,
    cfg: &AdaptationConfig,
) -> f64 {
    let r = predicted.to_vector() - measured.to_vector();
    0.5 * r.dot(&(cfg.gamma() * r))
}

fn condition_number(m: &Matrix2<f64>) -> f64 {
    let sv = m.singular_values();
    let (hi, lo) = (sv.max(), sv.min());
    if lo > 0.0 {
        hi / lo
    } else {
        f64::INFINITY
    }
}

/// `−(∂φ/∂θ)ᵀ (∂φ/∂uH)⁻ᵀ Γ (ûH − uH)`, evaluated at the predicted action.
#[allow(clippy::too_many_arguments)]
pub fn theta_gradient(
    x: RobotState,
    u_pred: VelocityCommand,
    u_meas: VelocityCommand,
    theta: &IntentParams,
    goal: &GoalPose,
    obs: &ObstacleSet,
    dcfg: &DynamicsConfig,
    acfg: &AdaptationConfig,
) -> Result<ParamVector> {
    let model = HumanModel::new(goal, obs, dcfg);
    let lin = model.linearize(&x.to_vector(), &u_pred.to_vector(), theta)?;
    let condition = condition_number(&lin.d_action);
    if !(condition <= acfg.conditioning_limit) {
        return Err(Error::SingularJacobian { condition });
    }
    let weighted: Vector2<f64> = acfg.gamma() * (u_pred.to_vector() - u_meas.to_vector());
    let adjoint = lin
        .d_action
        .transpose()
        .lu()
        .solve(&weighted)
        .ok_or(Error::SingularJacobian { condition })?;
    Ok(-(lin.d_theta.transpose() * adjoint))
}

/// Gradient step followed by projection onto the parameter box.
pub fn pgd_step(theta: &IntentParams, grad: &ParamVector, acfg: &AdaptationConfig) -> IntentParams {
    let mut eta = theta.to_vector() - acfg.mu * grad;
    if acfg.tied {
        let avg = 0.5 * (eta[0] + eta[1]);
        eta[0] = avg;
        eta[1] = avg;
    }
    for i in 0..5 {
        eta[i] = eta[i].clamp(acfg.theta_lower[i], acfg.theta_upper[i]);
    }
    IntentParams::from_vector(&eta)
}

#[allow(clippy::too_many_arguments)]
pub fn update(
    theta: &IntentParams,
    x: RobotState,
    u_pred: VelocityCommand,
    u_meas: VelocityCommand,
    goal: &GoalPose,
    obs: &ObstacleSet,
    dcfg: &DynamicsConfig,
    acfg: &AdaptationConfig,
) -> AdaptationRecord {
    let skip = |predicted: VelocityCommand, reason| AdaptationRecord {
        theta_before: *theta,
        theta_after: *theta,
        predicted,
        measured: u_meas,
        cost_j: prediction_cost(predicted, u_meas, acfg),
        skipped: true,
        skip_reason: reason,
    };
    if acfg.deadband.contains(u_meas) {
        return skip(u_pred, SkipReason::Deadband);
    }

    let model = HumanModel::new(goal, obs, dcfg);
    let stationary = model
        .phi_residual(x, u_pred, theta)
        .map(|r| r.norm() <= acfg.stationarity_tolerance);
    let predicted = match stationary {
        Ok(true) => u_pred,
        _ => match model.solve_rational_action(x, theta, u_pred) {
            Ok(sol) => sol.command,
            Err(_) => return skip(u_pred, SkipReason::DomainError),
        },
    };

    match theta_gradient(x, predicted, u_meas, theta, goal, obs, dcfg, acfg) {
        Ok(grad) => AdaptationRecord {
            theta_before: *theta,
            theta_after: pgd_step(theta, &grad, acfg),
            predicted,
            measured: u_meas,
            cost_j: prediction_cost(predicted, u_meas, acfg),
            skipped: false,
            skip_reason: SkipReason::None,
        },
        Err(Error::SingularJacobian { .. }) => skip(predicted, SkipReason::SingularJacobian),
        Err(_) => skip(predicted, SkipReason::DomainError),
    }
}
