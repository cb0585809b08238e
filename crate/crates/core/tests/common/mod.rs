//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use anmpc::adaptation::{prediction_cost, theta_gradient, AdaptationConfig};
use anmpc::dynamics::{DynamicsConfig, RobotState, VelocityCommand};
use anmpc::human_model::{GoalPose, HumanModel, IntentParams, Obstacle, ObstacleSet};
use anmpc::nmpc::{transcribe, NmpcConfig};
use anmpc::simulation::{Bounds, EpisodeResult, Scenario};
use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DCFG: DynamicsConfig = DynamicsConfig { ts: 0.1 };

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Relative error with a floor on the reference magnitude.
pub fn rel_err(value: &[f64], reference: &[f64], floor: f64) -> f64 {
    let diff: f64 = value
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = reference.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / scale.max(floor)
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub x: RobotState,
    pub goal: GoalPose,
    pub obstacles: ObstacleSet,
    pub theta: IntentParams,
}

impl Instance {
    pub fn model(&self) -> HumanModel<'_> {
        HumanModel::new(&self.goal, &self.obstacles, &DCFG)
    }
}

/// Random pose, goal and weights with `n_obstacles` centers between `near` and `far` from the robot.
pub fn random_instance(r: &mut ChaCha8Rng, n_obstacles: usize, near: f64, far: f64) -> Instance {
    let x = RobotState::new(
        r.random_range(-2.0..2.0),
        r.random_range(-2.0..2.0),
        r.random_range(-3.0..3.0),
    );
    let goal = GoalPose::new(
        r.random_range(-3.0..3.0),
        r.random_range(-3.0..3.0),
        r.random_range(-3.0..3.0),
    );
    let centers = (0..n_obstacles)
        .map(|_| {
            let (d, a) = (r.random_range(near..far), r.random_range(-3.1..3.1f64));
            Obstacle::new(x.px + d * a.cos(), x.py + d * a.sin())
        })
        .collect();
    let theta = IntentParams::new(
        r.random_range(0.2..5.0),
        r.random_range(0.2..5.0),
        r.random_range(0.2..5.0),
        r.random_range(0.5..3.0),
        r.random_range(0.1..2.0),
    )
    .unwrap();
    Instance {
        x,
        goal,
        obstacles: ObstacleSet::new(centers, 0.5).unwrap(),
        theta,
    }
}

pub fn random_command(r: &mut ChaCha8Rng) -> VelocityCommand {
    VelocityCommand::new(r.random_range(-0.4..0.4), r.random_range(-0.8..0.8))
}

/// Central-difference gradient of `Q` in the action.
pub fn fd_q_gradient(inst: &Instance, u: VelocityCommand, h: f64) -> Vector2<f64> {
    let m = inst.model();
    let q = |dv: f64, dw: f64| {
        m.q_value(
            inst.x,
            VelocityCommand::new(u.v + dv, u.omega + dw),
            &inst.theta,
        )
        .unwrap()
    };
    Vector2::new(
        (q(h, 0.0) - q(-h, 0.0)) / (2.0 * h),
        (q(0.0, h) - q(0.0, -h)) / (2.0 * h),
    )
}

/// Worst relative errors of φ and its three Jacobians against central differences.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradientReport {
    pub phi: f64,
    pub d_action: f64,
    pub d_state: f64,
    pub d_theta: f64,
}

pub fn derivative_suite(samples: usize, seed: u64) -> GradientReport {
    let mut r = rng(seed);
    let mut rep = GradientReport::default();
    let h = 1e-6;
    for i in 0..samples {
        let inst = random_instance(&mut r, i % 3, 0.7, 2.5);
        let u = random_command(&mut r);
        let m = inst.model();
        let (xv, uv) = (inst.x.to_vector(), u.to_vector());
        let lin = m.linearize(&xv, &uv, &inst.theta).unwrap();
        let phi = |x: &Vector3<f64>, u: &Vector2<f64>, th: &IntentParams| m.phi(x, u, th).unwrap();

        rep.phi = rep.phi.max(rel_err(
            lin.phi.as_slice(),
            fd_q_gradient(&inst, u, h).as_slice(),
            1e-2,
        ));

        let mut fd_u = nalgebra::Matrix2::zeros();
        for j in 0..2 {
            let mut e = Vector2::zeros();
            e[j] = h;
            fd_u.set_column(
                j,
                &((phi(&xv, &(uv + e), &inst.theta) - phi(&xv, &(uv - e), &inst.theta))
                    / (2.0 * h)),
            );
        }
        rep.d_action = rep
            .d_action
            .max(rel_err(lin.d_action.as_slice(), fd_u.as_slice(), 1e-2));

        let mut fd_x = nalgebra::Matrix2x3::zeros();
        for j in 0..3 {
            let mut e = Vector3::zeros();
            e[j] = h;
            fd_x.set_column(
                j,
                &((phi(&(xv + e), &uv, &inst.theta) - phi(&(xv - e), &uv, &inst.theta))
                    / (2.0 * h)),
            );
        }
        rep.d_state = rep
            .d_state
            .max(rel_err(lin.d_state.as_slice(), fd_x.as_slice(), 1e-2));

        let mut fd_t = anmpc::human_model::Matrix2x5::zeros();
        let tv = inst.theta.to_vector();
        for j in 0..5 {
            let mut e = anmpc::human_model::ParamVector::zeros();
            e[j] = h;
            let plus = IntentParams::from_vector(&(tv + e));
            let minus = IntentParams::from_vector(&(tv - e));
            fd_t.set_column(
                j,
                &((phi(&xv, &uv, &plus) - phi(&xv, &uv, &minus)) / (2.0 * h)),
            );
        }
        rep.d_theta = rep
            .d_theta
            .max(rel_err(lin.d_theta.as_slice(), fd_t.as_slice(), 1e-2));
    }
    rep
}

/// Worst relative error of the implicit θ-gradient of `J` against differences of
/// `J` evaluated at re-solved rational actions. Returns (error, instances used).
pub fn implicit_gradient_suite(samples: usize, n_obstacles: usize, seed: u64) -> (f64, usize) {
    let mut r = rng(seed);
    let acfg = AdaptationConfig::default();
    let h = 1e-5;
    let (mut worst, mut used) = (0.0f64, 0);
    while used < samples {
        let inst = random_instance(&mut r, n_obstacles, 0.6, 1.2);
        let meas = random_command(&mut r);
        let m = inst.model();
        let Ok(pred) = m.solve_rational_action(inst.x, &inst.theta, VelocityCommand::ZERO) else {
            continue;
        };
        let Ok(grad) = theta_gradient(
            inst.x,
            pred.command,
            meas,
            &inst.theta,
            &inst.goal,
            &inst.obstacles,
            &DCFG,
            &acfg,
        ) else {
            continue;
        };
        let j_at = |th: &IntentParams| {
            let u = m
                .solve_rational_action(inst.x, th, pred.command)
                .unwrap()
                .command;
            prediction_cost(u, meas, &acfg)
        };
        let tv = inst.theta.to_vector();
        let mut fd = [0.0; 5];
        for (j, slot) in fd.iter_mut().enumerate() {
            let mut e = anmpc::human_model::ParamVector::zeros();
            e[j] = h;
            *slot = (j_at(&IntentParams::from_vector(&(tv + e)))
                - j_at(&IntentParams::from_vector(&(tv - e))))
                / (2.0 * h);
        }
        worst = worst.max(rel_err(grad.as_slice(), &fd, 1e-9));
        used += 1;
    }
    (worst, used)
}

/// Outcome of comparing the Newton rational action with a brute-force grid minimum of `Q`.
#[derive(Debug, Clone, Copy, Default)]
pub struct GridReport {
    pub instances: usize,
    pub within_one_cell: usize,
    pub worst_residual: f64,
    /// Largest grid-vs-Newton offset measured in cells.
    pub worst_cells: f64,
}

pub const GRID_POINTS: usize = 401;
pub const GRID_HALF_WIDTH: [f64; 2] = [1.0, 2.0];

pub fn grid_argmin(inst: &Instance) -> VelocityCommand {
    let m = inst.model();
    let step = [
        2.0 * GRID_HALF_WIDTH[0] / (GRID_POINTS - 1) as f64,
        2.0 * GRID_HALF_WIDTH[1] / (GRID_POINTS - 1) as f64,
    ];
    let mut best = (f64::INFINITY, VelocityCommand::ZERO);
    for i in 0..GRID_POINTS {
        for j in 0..GRID_POINTS {
            let u = VelocityCommand::new(
                -GRID_HALF_WIDTH[0] + step[0] * i as f64,
                -GRID_HALF_WIDTH[1] + step[1] * j as f64,
            );
            if let Ok(q) = m.q_value(inst.x, u, &inst.theta) {
                if q < best.0 {
                    best = (q, u);
                }
            }
        }
    }
    best.1
}

/// Instances whose rational action falls outside the inner 90% of the grid are redrawn.
pub fn stationarity_oracle(instances: usize, seed: u64) -> GridReport {
    let mut r = rng(seed);
    let cell = [
        2.0 * GRID_HALF_WIDTH[0] / (GRID_POINTS - 1) as f64,
        2.0 * GRID_HALF_WIDTH[1] / (GRID_POINTS - 1) as f64,
    ];
    let mut rep = GridReport::default();
    while rep.instances < instances {
        let inst = random_instance(&mut r, 1, 0.6, 1.5);
        let Ok(sol) =
            inst.model()
                .solve_rational_action(inst.x, &inst.theta, VelocityCommand::ZERO)
        else {
            rep.instances += 1;
            rep.worst_residual = f64::INFINITY;
            continue;
        };
        let u = sol.command;
        if u.v.abs() > 0.9 * GRID_HALF_WIDTH[0] || u.omega.abs() > 0.9 * GRID_HALF_WIDTH[1] {
            continue;
        }
        rep.instances += 1;
        let g = grid_argmin(&inst);
        let cells = ((u.v - g.v).abs() / cell[0]).max((u.omega - g.omega).abs() / cell[1]);
        rep.worst_cells = rep.worst_cells.max(cells);
        if cells <= 1.0 {
            rep.within_one_cell += 1;
        }
        let res = inst
            .model()
            .phi_residual(inst.x, u, &inst.theta)
            .unwrap()
            .norm();
        rep.worst_residual = rep.worst_residual.max(res);
    }
    rep
}

/// Checks layout counts against `8N + 3` variables, `5N + 3` equalities,
/// `N·n_O` CBF rows and `4N` box rows. Returns the number of mismatching pairs.
pub fn sizing_mismatches(max_n: usize, max_obstacles: usize) -> usize {
    let cfg_base = NmpcConfig::default();
    let mut bad = 0;
    for n_o in 0..=max_obstacles {
        let centers = (0..n_o)
            .map(|i| Obstacle::new(2.0 + i as f64, 5.0))
            .collect();
        let scenario = Scenario::new(
            "sizing",
            RobotState::new(0.0, 0.0, 0.0),
            GoalPose::new(1.0, 0.0, 0.0),
            ObstacleSet::new(centers, 0.5).unwrap(),
            Bounds {
                x_min: -1.0,
                x_max: 20.0,
                y_min: -1.0,
                y_max: 10.0,
            },
        )
        .unwrap();
        for n in 1..=max_n {
            let cfg = NmpcConfig {
                horizon: n,
                ..cfg_base
            };
            let l = transcribe(
                scenario.start,
                IntentParams::initial_estimate(),
                &scenario,
                &cfg,
            )
            .layout;
            let ok = l.n_variables == 8 * n + 3
                && l.n_equalities == 5 * n + 3
                && l.n_cbf == n * n_o
                && l.n_input_box == 4 * n
                && l.n_inequalities == n * n_o + 4 * n
                && l.slack_index(n - 1) == l.n_variables - 1;
            bad += usize::from(!ok);
        }
    }
    bad
}

/// Straight 6 m run with one obstacle `offset` metres beside the line of travel.
pub fn corridor(offset: f64) -> Scenario {
    Scenario::new(
        "corridor",
        RobotState::new(0.0, 0.0, 0.0),
        GoalPose::new(6.0, 0.0, 0.0),
        ObstacleSet::new(vec![Obstacle::new(3.0, offset)], 0.5).unwrap(),
        Bounds {
            x_min: -1.0,
            x_max: 7.0,
            y_min: -2.0,
            y_max: 2.0,
        },
    )
    .unwrap()
}

/// Mean ‖u_applied − uH_meas‖ over an episode.
pub fn tracking_error(r: &EpisodeResult) -> f64 {
    let n = r.trace.len().max(1) as f64;
    r.trace
        .iter()
        .map(|t| (t.u_applied.to_vector() - t.u_h_meas.to_vector()).norm())
        .sum::<f64>()
        / n
}

pub fn non_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] <= w[1])
}
