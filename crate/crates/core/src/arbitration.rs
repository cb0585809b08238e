//! Linear policy blending `u = λ uR + (1 − λ) uH` with deadband takeover and saturation.

use serde::{Deserialize, Serialize};

use crate::dynamics::VelocityCommand;
use crate::error::{Error, Result};

/// Operator inputs with both components inside this region count as "no command".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Deadband {
    pub v: f64,
    pub omega: f64,
}

impl Default for Deadband {
    fn default() -> Self {
        Self {
            v: 0.02,
            omega: 0.04,
        }
    }
}

impl Deadband {
    pub fn contains(&self, u: VelocityCommand) -> bool {
        u.v.abs() <= self.v && u.omega.abs() <= self.omega
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlendConfig {
    pub lambda: f64,
    pub v_max: f64,
    pub omega_max: f64,
    pub deadband: Deadband,
}

impl Default for BlendConfig {
    fn default() -> Self {
        Self {
            lambda: 0.35,
            v_max: 0.4,
            omega_max: 0.8,
            deadband: Deadband::default(),
        }
    }
}

impl BlendConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::validation(
                "lambda",
                format!("must lie in [0, 1], got {}", self.lambda),
            ));
        }
        if !(self.v_max > 0.0 && self.omega_max > 0.0) {
            return Err(Error::validation(
                "v_max/omega_max",
                "saturation limits must be positive",
            ));
        }
        if !(self.deadband.v >= 0.0 && self.deadband.omega >= 0.0) {
            return Err(Error::validation("deadband", "must be non-negative"));
        }
        Ok(())
    }

    pub fn saturate(&self, u: VelocityCommand) -> VelocityCommand {
        VelocityCommand::new(
            u.v.clamp(-self.v_max, self.v_max),
            u.omega.clamp(-self.omega_max, self.omega_max),
        )
    }
}

/// Returns the saturated blended command and the weight actually used.
pub fn blend(
    u_r: VelocityCommand,
    u_h: VelocityCommand,
    cfg: &BlendConfig,
) -> (VelocityCommand, f64) {
    let lambda = if cfg.deadband.contains(u_h) {
        1.0
    } else {
        cfg.lambda
    };
    let mixed = VelocityCommand::new(
        lambda * u_r.v + (1.0 - lambda) * u_h.v,
        lambda * u_r.omega + (1.0 - lambda) * u_h.omega,
    );
    (cfg.saturate(mixed), lambda)
}
