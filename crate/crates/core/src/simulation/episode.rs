//! The 10 Hz closed loop: sense, plan, blend, step, adapt.

use serde::{Deserialize, Serialize};

use super::metrics::{compute_metrics, min_path_distance, TraceMetrics};
use super::operator::{Operator, OperatorModel};
use super::Scenario;
use crate::adaptation::{self, AdaptationConfig, PredictionSource, SkipReason};
use crate::arbitration::{blend, BlendConfig};
use crate::dynamics::{angle_diff, step, RobotState, VelocityCommand};
use crate::error::{Error, Result};
use crate::human_model::{HumanModel, IntentParams};
use crate::nmpc::{self, reference_for, warm_shift, HorizonSolution, NmpcConfig};
use crate::safety::{h_values, min_or_none, psi};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub nmpc: NmpcConfig,
    pub blend: BlendConfig,
    pub adaptation: AdaptationConfig,
    pub initial_theta: IntentParams,
    /// Seconds of simulated time before the episode is cut off.
    pub duration_limit: f64,
    pub goal_tolerance: f64,
    pub yaw_tolerance: f64,
    /// Apply the robot input computed on the previous tick.
    pub actuation_delay: bool,
    /// Wall-clock budget per solve; a slower solve is discarded for the shifted previous plan.
    pub solve_deadline: Option<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            nmpc: NmpcConfig::default(),
            blend: BlendConfig::default(),
            adaptation: AdaptationConfig::default(),
            initial_theta: IntentParams::initial_estimate(),
            duration_limit: 120.0,
            goal_tolerance: 0.2,
            yaw_tolerance: 0.3,
            actuation_delay: false,
            solve_deadline: None,
        }
    }
}

impl SimConfig {
    /// Sets the arbitration weight in both the planner and the blender.
    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.nmpc.lambda = lambda;
        self.blend.lambda = lambda;
        self
    }

    pub fn with_slack_weight(mut self, w: f64) -> Self {
        self.nmpc.slack_weight = w;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.nmpc.validate()?;
        self.blend.validate()?;
        self.adaptation.validate()?;
        self.initial_theta.validate()?;
        if self.nmpc.lambda != self.blend.lambda {
            return Err(Error::validation(
                "lambda",
                "planner and blender weights differ",
            ));
        }
        if !(self.duration_limit >= 0.0 && self.duration_limit.is_finite()) {
            return Err(Error::validation(
                "duration_limit",
                "must be finite and non-negative",
            ));
        }
        if !(self.goal_tolerance > 0.0 && self.yaw_tolerance > 0.0) {
            return Err(Error::validation(
                "goal_tolerance",
                "tolerances must be positive",
            ));
        }
        if matches!(self.solve_deadline, Some(d) if !(d > 0.0)) {
            return Err(Error::validation("solve_deadline", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub iters: usize,
    pub viol: f64,
    /// Seconds.
    pub time: f64,
    pub converged: bool,
    /// The applied plan is the shifted previous one.
    pub fallback: bool,
    pub overrun: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptationSummary {
    pub cost_j: f64,
    pub skipped: bool,
    pub skip_reason: SkipReason,
}

/// One line of the episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: u64,
    pub t: f64,
    pub state: RobotState,
    pub next_state: RobotState,
    #[serde(rename = "uH_meas")]
    pub u_h_meas: VelocityCommand,
    #[serde(rename = "uH_pred")]
    pub u_h_pred: VelocityCommand,
    #[serde(rename = "uR")]
    pub u_r: VelocityCommand,
    pub u_applied: VelocityCommand,
    pub lambda_effective: f64,
    /// Estimate used for this tick's plan.
    pub theta_hat: [f64; 5],
    pub h_min: Option<f64>,
    pub psi_min: Option<f64>,
    pub delta0: f64,
    pub cost: f64,
    pub solver: SolverStats,
    pub adaptation: AdaptationSummary,
}

impl TickRecord {
    /// The record with wall-clock fields zeroed, for bit-exact comparisons.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.solver.time = 0.0;
        r.solver.overrun = false;
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub success: bool,
    pub time_to_goal: Option<f64>,
    pub min_obstacle_distance: Option<f64>,
    pub path_length: f64,
    pub human_effort: f64,
    pub mean_prediction_cost_first10s: Option<f64>,
    pub mean_prediction_cost_last10s: Option<f64>,
    pub ticks: usize,
    pub final_state: RobotState,
    pub final_theta: IntentParams,
    pub solver_fallbacks: usize,
    pub overruns: usize,
    pub mean_solve_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub metrics: EpisodeMetrics,
    pub trace: Vec<TickRecord>,
}

/// Closed-loop state carried from tick to tick.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    scenario: Scenario,
    cfg: SimConfig,
    state: RobotState,
    theta: IntentParams,
    plan: Option<HorizonSolution>,
    pending_ur: VelocityCommand,
    tick: u64,
    trace: Vec<TickRecord>,
    fallbacks: usize,
    overruns: usize,
}

impl ClosedLoop {
    pub fn new(scenario: Scenario, cfg: SimConfig) -> Result<Self> {
        cfg.validate()?;
        scenario.validate()?;
        Ok(Self {
            state: scenario.start,
            theta: cfg.initial_theta,
            scenario,
            cfg,
            plan: None,
            pending_ur: VelocityCommand::ZERO,
            tick: 0,
            trace: Vec::new(),
            fallbacks: 0,
            overruns: 0,
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn state(&self) -> RobotState {
        self.state
    }

    pub fn theta(&self) -> IntentParams {
        self.theta
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    /// Simulated time of the next tick.
    pub fn time(&self) -> f64 {
        self.tick as f64 * self.cfg.nmpc.dynamics.ts
    }

    pub fn trace(&self) -> &[TickRecord] {
        &self.trace
    }

    /// Most recent horizon plan.
    pub fn plan(&self) -> Option<&HorizonSolution> {
        self.plan.as_ref()
    }

    pub fn goal_reached(&self) -> bool {
        let g = &self.scenario.goal;
        let x = self.state;
        (x.px - g.gx).hypot(x.py - g.gy) <= self.cfg.goal_tolerance
            && angle_diff(x.yaw, g.gyaw).abs() <= self.cfg.yaw_tolerance
    }

    /// Changes the arbitration weight for subsequent ticks.
    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        let cfg = self.cfg.with_lambda(lambda);
        cfg.validate()?;
        self.cfg = cfg;
        Ok(())
    }

    fn resting_plan(&self) -> HorizonSolution {
        let n = self.cfg.nmpc.horizon;
        let mut plan = HorizonSolution {
            states: vec![self.state; n + 1],
            robot_inputs: vec![VelocityCommand::ZERO; n],
            human_inputs: vec![VelocityCommand::ZERO; n],
            slacks: vec![0.0; n],
            sqp_iterations: 0,
            max_constraint_violation: f64::INFINITY,
            solve_time: 0.0,
            converged: false,
            cost: 0.0,
        };
        plan.cost = nmpc::cost(
            &plan,
            &reference_for(self.state, self.scenario.goal, &self.cfg.nmpc),
            &self.cfg.nmpc,
        );
        plan
    }

    /// Advances one tick with the given measured operator command.
    pub fn step(&mut self, u_h_meas: VelocityCommand) -> &TickRecord {
        let x = self.state;
        let theta = self.theta;
        let lambda_eff = if self.cfg.blend.deadband.contains(u_h_meas) {
            1.0
        } else {
            self.cfg.blend.lambda
        };
        let ncfg = NmpcConfig {
            lambda: lambda_eff,
            ..self.cfg.nmpc
        };

        let warm = self.plan.as_ref().map(warm_shift);
        let solved = nmpc::solve(x, &theta, &self.scenario, &ncfg, warm.as_ref());
        let overrun =
            matches!((&solved, self.cfg.solve_deadline), (Ok(s), Some(d)) if s.solve_time > d);
        let (plan, stats) = match solved {
            Ok(s) if !overrun => {
                let stats = SolverStats {
                    iters: s.sqp_iterations,
                    viol: s.max_constraint_violation,
                    time: s.solve_time,
                    converged: s.converged,
                    fallback: false,
                    overrun: false,
                };
                (s, stats)
            }
            other => {
                let (iters, time) = other
                    .as_ref()
                    .map_or((0, 0.0), |s| (s.sqp_iterations, s.solve_time));
                log::warn!(
                    "tick {}: solver {}, reusing shifted plan",
                    self.tick,
                    if overrun { "overran" } else { "failed" }
                );
                self.fallbacks += 1;
                self.overruns += usize::from(overrun);
                let mut plan = warm.unwrap_or_else(|| self.resting_plan());
                if let Some(first) = plan.states.first_mut() {
                    *first = x;
                }
                let stats = SolverStats {
                    iters,
                    viol: plan.max_constraint_violation,
                    time,
                    converged: false,
                    fallback: true,
                    overrun,
                };
                (plan, stats)
            }
        };

        let u_r_now = plan.robot_inputs[0];
        let u_r = if self.cfg.actuation_delay {
            std::mem::replace(&mut self.pending_ur, u_r_now)
        } else {
            u_r_now
        };
        let (u_applied, lambda_effective) = blend(u_r, u_h_meas, &self.cfg.blend);
        let next = step(x, u_applied, &ncfg.dynamics);

        let obs = &self.scenario.obstacles;
        let h_min = min_or_none(&h_values(x, obs));
        let psi_min = min_or_none(&psi(x, u_applied, obs, &ncfg.barrier, &ncfg.dynamics));

        let u_pred = match self.cfg.adaptation.prediction_source {
            PredictionSource::Nmpc => plan.human_inputs[0],
            PredictionSource::Fresh => HumanModel::new(&self.scenario.goal, obs, &ncfg.dynamics)
                .solve_rational_action(x, &theta, plan.human_inputs[0])
                .map_or(plan.human_inputs[0], |a| a.command),
        };
        let record = adaptation::update(
            &theta,
            x,
            u_pred,
            u_h_meas,
            &self.scenario.goal,
            obs,
            &ncfg.dynamics,
            &self.cfg.adaptation,
        );

        self.trace.push(TickRecord {
            tick: self.tick,
            t: self.time(),
            state: x,
            next_state: next,
            u_h_meas,
            u_h_pred: record.predicted,
            u_r,
            u_applied,
            lambda_effective,
            theta_hat: theta.to_array(),
            h_min,
            psi_min,
            delta0: plan.slacks[0],
            cost: plan.cost,
            solver: stats,
            adaptation: AdaptationSummary {
                cost_j: record.cost_j,
                skipped: record.skipped,
                skip_reason: record.skip_reason,
            },
        });
        self.theta = record.theta_after;
        self.state = next;
        self.plan = Some(plan);
        self.tick += 1;
        self.trace.last().expect("just pushed")
    }

    pub fn metrics(&self) -> EpisodeMetrics {
        let ts = self.cfg.nmpc.dynamics.ts;
        let success = self.goal_reached();
        let trace =
            compute_metrics(&self.trace, &self.scenario.obstacles, ts).unwrap_or_else(|_| {
                TraceMetrics {
                    min_obstacle_distance: min_path_distance(
                        &[self.state.position()],
                        &self.scenario.obstacles,
                    ),
                    path_length: 0.0,
                    human_effort: 0.0,
                    mean_prediction_cost_first10s: None,
                    mean_prediction_cost_last10s: None,
                }
            });
        let solves: Vec<f64> = self
            .trace
            .iter()
            .filter(|r| !r.solver.fallback)
            .map(|r| r.solver.time)
            .collect();
        EpisodeMetrics {
            success,
            time_to_goal: success.then(|| self.time()),
            min_obstacle_distance: trace.min_obstacle_distance,
            path_length: trace.path_length,
            human_effort: trace.human_effort,
            mean_prediction_cost_first10s: trace.mean_prediction_cost_first10s,
            mean_prediction_cost_last10s: trace.mean_prediction_cost_last10s,
            ticks: self.trace.len(),
            final_state: self.state,
            final_theta: self.theta,
            solver_fallbacks: self.fallbacks,
            overruns: self.overruns,
            mean_solve_time: (!solves.is_empty())
                .then(|| solves.iter().sum::<f64>() / solves.len() as f64),
        }
    }

    pub fn into_result(self) -> EpisodeResult {
        EpisodeResult {
            metrics: self.metrics(),
            trace: self.trace,
        }
    }
}

/// Runs one episode until the goal is reached or the duration limit expires.
pub fn run_episode(
    scenario: &Scenario,
    operator: &OperatorModel,
    cfg: &SimConfig,
    seed: u64,
) -> Result<EpisodeResult> {
    let mut sim = ClosedLoop::new(scenario.clone(), *cfg)?;
    let mut op = Operator::new(operator.clone(), seed)?;
    let ts = cfg.nmpc.dynamics.ts;
    let max_ticks = (cfg.duration_limit / ts + 1e-9).floor() as u64;
    while sim.tick() < max_ticks && !sim.goal_reached() {
        let u = op.command(sim.tick(), sim.state(), &sim.scenario, &cfg.nmpc.dynamics);
        sim.step(u);
    }
    Ok(sim.into_result())
}
