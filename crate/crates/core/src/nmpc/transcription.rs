//! Direct transcription: variable layout, constraint counts and residual evaluation.

use nalgebra::{DVector, Vector3};
use serde::Serialize;

use super::{cost, reference_for, HorizonSolution, NmpcConfig, ReferenceTrajectory};
use crate::dynamics::{pose_defect, step, RobotState, VelocityCommand};
use crate::error::Result;
use crate::human_model::{HumanModel, IntentParams};
use crate::safety::psi;
use crate::simulation::Scenario;

/// One family of constraint rows and the variable blocks each row touches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BlockSparsity {
    pub name: &'static str,
    pub rows: usize,
    /// Structural nonzeros per row.
    pub row_nonzeros: usize,
    pub depends_on: &'static [&'static str],
}

/// Sizes of the transcribed problem.
///
/// Decision vector order: states `x_0..x_N`, robot inputs, human inputs, slacks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NlpLayout {
    pub horizon: usize,
    pub n_obstacles: usize,
    pub n_variables: usize,
    pub n_initial: usize,
    pub n_dynamics: usize,
    pub n_stationarity: usize,
    pub n_equalities: usize,
    pub n_cbf: usize,
    pub n_input_box: usize,
    pub n_inequalities: usize,
    pub sparsity: Vec<BlockSparsity>,
}

impl NlpLayout {
    pub fn new(horizon: usize, n_obstacles: usize) -> Self {
        let n = horizon;
        let n_dynamics = 3 * n;
        let n_stationarity = 2 * n;
        let n_cbf = n * n_obstacles;
        let n_input_box = 4 * n;
        let sparsity = vec![
            BlockSparsity {
                name: "initial",
                rows: 3,
                row_nonzeros: 1,
                depends_on: &["x_0"],
            },
            // x_{k+1} − x_k − B(x_k)(λ uR_k + (1 − λ) uH_k)
            BlockSparsity {
                name: "dynamics",
                rows: n_dynamics,
                row_nonzeros: 3 + 1 + 2 + 2,
                depends_on: &["x_k", "x_k+1", "uR_k", "uH_k"],
            },
            BlockSparsity {
                name: "stationarity",
                rows: n_stationarity,
                row_nonzeros: 3 + 2,
                depends_on: &["x_k", "uH_k"],
            },
            BlockSparsity {
                name: "cbf",
                rows: n_cbf,
                row_nonzeros: 3 + 2 + 2 + 1,
                depends_on: &["x_k", "uR_k", "uH_k", "delta_k"],
            },
            BlockSparsity {
                name: "input_box",
                rows: n_input_box,
                row_nonzeros: 1,
                depends_on: &["uR_k"],
            },
        ];
        Self {
            horizon,
            n_obstacles,
            n_variables: 3 * (n + 1) + 2 * n + 2 * n + n,
            n_initial: 3,
            n_dynamics,
            n_stationarity,
            n_equalities: 3 + n_dynamics + n_stationarity,
            n_cbf,
            n_input_box,
            n_inequalities: n_cbf + n_input_box,
            sparsity,
        }
    }

    pub fn state_index(&self, k: usize) -> usize {
        3 * k
    }

    pub fn robot_input_index(&self, k: usize) -> usize {
        3 * (self.horizon + 1) + 2 * k
    }

    pub fn human_input_index(&self, k: usize) -> usize {
        3 * (self.horizon + 1) + 2 * self.horizon + 2 * k
    }

    pub fn slack_index(&self, k: usize) -> usize {
        3 * (self.horizon + 1) + 4 * self.horizon + k
    }

    pub fn jacobian_nonzeros(&self) -> usize {
        self.sparsity.iter().map(|b| b.rows * b.row_nonzeros).sum()
    }
}

/// Constraint residuals of a candidate trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Residuals {
    pub initial: f64,
    /// `‖x_{k+1} − f(x_k, u_k)‖` per step, yaw measured the short way.
    pub dynamics: Vec<f64>,
    /// `‖φ(x_k, uH_k, θ̂)‖` per step.
    pub stationarity: Vec<f64>,
    /// `min_ℓ ψ_ℓ(x_k, u_k) − δ_k` per step; `+∞` without obstacles.
    pub cbf_margin: Vec<f64>,
    /// Largest excursion of a robot input outside its box.
    pub input_box: f64,
}

impl Residuals {
    pub fn max_violation(&self) -> f64 {
        self.dynamics
            .iter()
            .chain(&self.stationarity)
            .copied()
            .chain(self.cbf_margin.iter().map(|m| (-m).max(0.0)))
            .fold(self.initial.max(self.input_box), f64::max)
    }
}

/// The transcribed problem for one measurement and parameter estimate.
#[derive(Debug, Clone)]
pub struct Nlp<'a> {
    pub layout: NlpLayout,
    pub x0: RobotState,
    pub theta: IntentParams,
    pub scenario: &'a Scenario,
    pub cfg: &'a NmpcConfig,
    pub reference: ReferenceTrajectory,
}

pub fn transcribe<'a>(
    x0: RobotState,
    theta: IntentParams,
    scenario: &'a Scenario,
    cfg: &'a NmpcConfig,
) -> Nlp<'a> {
    Nlp {
        layout: NlpLayout::new(cfg.horizon, scenario.obstacles.len()),
        x0,
        theta,
        scenario,
        cfg,
        reference: reference_for(x0, scenario.goal, cfg),
    }
}

impl Nlp<'_> {
    pub fn pack(&self, sol: &HorizonSolution) -> DVector<f64> {
        let l = &self.layout;
        let mut z = DVector::zeros(l.n_variables);
        for (k, s) in sol.states.iter().enumerate() {
            z.fixed_rows_mut::<3>(l.state_index(k))
                .copy_from(&s.to_vector());
        }
        for k in 0..l.horizon {
            z.fixed_rows_mut::<2>(l.robot_input_index(k))
                .copy_from(&sol.robot_inputs[k].to_vector());
            z.fixed_rows_mut::<2>(l.human_input_index(k))
                .copy_from(&sol.human_inputs[k].to_vector());
            z[l.slack_index(k)] = sol.slacks[k];
        }
        z
    }

    pub fn unpack(&self, z: &DVector<f64>) -> HorizonSolution {
        let l = &self.layout;
        let n = l.horizon;
        let vec3 = |i: usize| Vector3::new(z[i], z[i + 1], z[i + 2]);
        let cmd = |i: usize| VelocityCommand::new(z[i], z[i + 1]);
        let mut sol = HorizonSolution {
            states: (0..=n)
                .map(|k| RobotState::from_vector(&vec3(l.state_index(k))))
                .collect(),
            robot_inputs: (0..n).map(|k| cmd(l.robot_input_index(k))).collect(),
            human_inputs: (0..n).map(|k| cmd(l.human_input_index(k))).collect(),
            slacks: (0..n).map(|k| z[l.slack_index(k)]).collect(),
            sqp_iterations: 0,
            max_constraint_violation: 0.0,
            solve_time: 0.0,
            converged: false,
            cost: 0.0,
        };
        sol.cost = self.cost(&sol);
        sol
    }

    pub fn cost(&self, sol: &HorizonSolution) -> f64 {
        cost(sol, &self.reference, self.cfg)
    }

    pub fn residuals(&self, sol: &HorizonSolution) -> Result<Residuals> {
        let n = self.layout.horizon;
        let cfg = self.cfg;
        let obs = &self.scenario.obstacles;
        let model = HumanModel::new(&self.scenario.goal, obs, &cfg.dynamics);
        let mut r = Residuals {
            initial: pose_defect(sol.states[0], self.x0),
            dynamics: Vec::with_capacity(n),
            stationarity: Vec::with_capacity(n),
            cbf_margin: Vec::with_capacity(n),
            input_box: 0.0,
        };
        for k in 0..n {
            let x = sol.states[k];
            let (ur, uh) = (sol.robot_inputs[k], sol.human_inputs[k]);
            let u = cfg.blended(ur, uh);
            r.dynamics
                .push(pose_defect(sol.states[k + 1], step(x, u, &cfg.dynamics)));
            r.stationarity
                .push(model.phi_residual(x, uh, &self.theta)?.norm());
            let margin = psi(x, u, obs, &cfg.barrier, &cfg.dynamics)
                .into_iter()
                .fold(f64::INFINITY, f64::min);
            r.cbf_margin.push(margin - sol.slacks[k]);
            let b = &cfg.input_bounds;
            r.input_box = r
                .input_box
                .max(ur.v.abs() - b.v_max)
                .max(ur.omega.abs() - b.omega_max);
        }
        Ok(r)
    }
}
