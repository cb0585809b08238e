//! Synthetic operators producing the measured human command each tick.

use serde::{Deserialize, Serialize};

use crate::dynamics::{angle_diff, DynamicsConfig, RobotState, VelocityCommand};
use crate::error::{Error, Result};
use crate::human_model::{ActionGrid, HumanModel, IntentParams, RationalityCoefficient};
use crate::simulation::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
}

/// Proportional pure-pursuit law of the scripted driver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PursuitGains {
    pub k_v: f64,
    pub k_omega: f64,
    /// Distance at which the driver moves on to the next waypoint.
    pub switch_radius: f64,
    /// The driver lets go of the stick inside this radius of its final waypoint.
    pub stop_radius: f64,
    pub v_max: f64,
    pub omega_max: f64,
}

impl Default for PursuitGains {
    fn default() -> Self {
        Self {
            k_v: 0.5,
            k_omega: 1.5,
            switch_radius: 0.3,
            stop_radius: 0.15,
            v_max: 0.4,
            omega_max: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OperatorModel {
    /// Plays the exact minimizer of Q under `true_theta`, clipped to the joystick range.
    Rational { true_theta: IntentParams },
    /// Samples the Boltzmann density of Q under `true_theta` on a discrete action grid.
    Boltzmann {
        true_theta: IntentParams,
        beta: RationalityCoefficient,
        #[serde(default)]
        grid: ActionGrid,
    },
    /// Drives straight at each waypoint in turn; an empty list means "the goal".
    ScriptedWaypoints {
        #[serde(default)]
        waypoints: Vec<Waypoint>,
        #[serde(default)]
        gains: PursuitGains,
    },
    /// Reproduces recorded commands tick by tick, then lets go.
    Replay { commands: Vec<VelocityCommand> },
    /// Never commands anything; commands arrive from outside the simulator.
    External,
}

impl OperatorModel {
    /// Operator weights used by the synthetic experiments.
    pub fn default_true_theta() -> IntentParams {
        IntentParams {
            theta1_x: 1.0,
            theta1_y: 1.0,
            theta1_yaw: 2.0,
            theta2: 0.5,
            theta3: 0.5,
        }
    }

    pub fn rational() -> Self {
        Self::Rational {
            true_theta: Self::default_true_theta(),
        }
    }

    /// Boltzmann operator with β = 50.
    pub fn boltzmann() -> Self {
        Self::Boltzmann {
            true_theta: Self::default_true_theta(),
            beta: RationalityCoefficient::new(50.0).expect("positive"),
            grid: ActionGrid::default(),
        }
    }

    pub fn scripted(waypoints: Vec<Waypoint>) -> Self {
        Self::ScriptedWaypoints {
            waypoints,
            gains: PursuitGains::default(),
        }
    }

    /// Replays the `uH_meas` column of an episode log.
    pub fn replay_log(records: &[super::TickRecord]) -> Self {
        Self::Replay {
            commands: records.iter().map(|r| r.u_h_meas).collect(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Rational { .. } => "rational",
            Self::Boltzmann { .. } => "boltzmann",
            Self::ScriptedWaypoints { .. } => "scripted_waypoints",
            Self::Replay { .. } => "replay",
            Self::External => "external",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Rational { true_theta } | Self::Boltzmann { true_theta, .. } => {
                true_theta.validate()?
            }
            Self::ScriptedWaypoints { waypoints, gains } => {
                if waypoints
                    .iter()
                    .any(|w| !(w.x.is_finite() && w.y.is_finite()))
                {
                    return Err(Error::validation("waypoints", "must be finite"));
                }
                let g = gains;
                if ![g.k_v, g.k_omega, g.switch_radius, g.v_max, g.omega_max]
                    .iter()
                    .all(|v| *v > 0.0)
                    || g.stop_radius < 0.0
                {
                    return Err(Error::validation(
                        "gains",
                        "gains and radii must be positive",
                    ));
                }
            }
            Self::Replay { commands } => {
                if commands.iter().any(|c| !c.is_finite()) {
                    return Err(Error::validation("commands", "must be finite"));
                }
            }
            Self::External => {}
        }
        if let Self::Boltzmann { grid, .. } = self {
            if grid.points_per_axis < 2 || !(grid.v_max > 0.0 && grid.omega_max > 0.0) {
                return Err(Error::validation(
                    "grid",
                    "needs at least 2 points per axis and a positive box",
                ));
            }
        }
        Ok(())
    }
}

/// A running operator: the model plus its per-episode state.
#[derive(Debug, Clone)]
pub struct Operator {
    model: OperatorModel,
    seed: u64,
    waypoint: usize,
    last: VelocityCommand,
    /// Joystick range the rational operator is clipped to.
    range: (f64, f64),
}

fn mix(seed: u64, tick: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ tick.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Operator {
    pub fn new(model: OperatorModel, seed: u64) -> Result<Self> {
        model.validate()?;
        Ok(Self {
            model,
            seed,
            waypoint: 0,
            last: VelocityCommand::ZERO,
            range: (0.4, 0.8),
        })
    }

    pub fn model(&self) -> &OperatorModel {
        &self.model
    }

    pub fn command(
        &mut self,
        tick: u64,
        x: RobotState,
        scenario: &Scenario,
        dcfg: &DynamicsConfig,
    ) -> VelocityCommand {
        let u = match &self.model {
            OperatorModel::Rational { true_theta } => {
                let model = HumanModel::new(&scenario.goal, &scenario.obstacles, dcfg);
                match model.solve_rational_action(x, true_theta, self.last) {
                    Ok(sol) => VelocityCommand::new(
                        sol.command.v.clamp(-self.range.0, self.range.0),
                        sol.command.omega.clamp(-self.range.1, self.range.1),
                    ),
                    Err(_) => self.last,
                }
            }
            OperatorModel::Boltzmann {
                true_theta,
                beta,
                grid,
            } => {
                let model = HumanModel::new(&scenario.goal, &scenario.obstacles, dcfg);
                model
                    .sample_boltzmann_action(x, true_theta, *beta, grid, mix(self.seed, tick))
                    .unwrap_or(VelocityCommand::ZERO)
            }
            OperatorModel::ScriptedWaypoints { waypoints, gains } => {
                let goal = Waypoint {
                    x: scenario.goal.gx,
                    y: scenario.goal.gy,
                };
                let route: &[Waypoint] = if waypoints.is_empty() {
                    std::slice::from_ref(&goal)
                } else {
                    waypoints
                };
                pursue(x, route, &mut self.waypoint, gains)
            }
            OperatorModel::Replay { commands } => usize::try_from(tick)
                .ok()
                .and_then(|i| commands.get(i))
                .copied()
                .unwrap_or_default(),
            OperatorModel::External => VelocityCommand::ZERO,
        };
        self.last = u;
        u
    }
}

fn pursue(
    x: RobotState,
    route: &[Waypoint],
    index: &mut usize,
    g: &PursuitGains,
) -> VelocityCommand {
    let distance = |w: &Waypoint| (w.x - x.px).hypot(w.y - x.py);
    while *index + 1 < route.len() && distance(&route[*index]) < g.switch_radius {
        *index += 1;
    }
    let target = route[*index];
    let d = distance(&target);
    if *index + 1 == route.len() && d < g.stop_radius {
        return VelocityCommand::ZERO;
    }
    let heading = angle_diff((target.y - x.py).atan2(target.x - x.px), x.yaw);
    let v = (g.k_v * d).min(g.v_max) * heading.cos().max(0.0);
    let omega = (g.k_omega * heading).clamp(-g.omega_max, g.omega_max);
    VelocityCommand::new(v, omega)
}
