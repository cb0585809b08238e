mod common;

use anmpc::dynamics::{step, RobotState, VelocityCommand};
use anmpc::human_model::{GoalPose, HumanModel, IntentParams, Obstacle, ObstacleSet};
use anmpc::nmpc::{self, build_reference, transcribe, InputBounds, NmpcConfig};
use anmpc::safety::psi;
use anmpc::simulation::{Bounds, Scenario};
use common::*;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

fn arena() -> Bounds {
    Bounds {
        x_min: -10.0,
        x_max: 10.0,
        y_min: -10.0,
        y_max: 10.0,
    }
}

fn theta() -> IntentParams {
    IntentParams::initial_estimate()
}

#[test]
fn sizing_for_every_horizon_and_obstacle_count() {
    assert_eq!(sizing_mismatches(100, 10), 0);
}

#[test]
fn paper_problem_has_803_variables() {
    let s = Scenario::builtin("lab_gA").unwrap();
    let cfg = NmpcConfig::default();
    let nlp = transcribe(s.start, theta(), &s, &cfg);
    assert_eq!(nlp.layout.n_variables, 803);
    assert_eq!(nlp.layout.n_cbf, 1000);
}

#[test]
fn resting_at_goal_needs_no_input() {
    let s = Scenario::builtin("open").unwrap();
    let at_goal = Scenario::new(
        "at_goal",
        RobotState::new(s.goal.gx, s.goal.gy, s.goal.gyaw),
        s.goal,
        s.obstacles.clone(),
        s.bounds,
    )
    .unwrap();
    let sol = nmpc::solve(
        at_goal.start,
        &theta(),
        &at_goal,
        &NmpcConfig::default(),
        None,
    )
    .unwrap();
    assert!(sol.robot_inputs.iter().all(|u| u.norm() <= 1e-4));
    assert!(sol.cost <= 1e-6, "{}", sol.cost);
}

#[test]
fn full_autonomy_sees_the_estimate_only_through_human_effort() {
    // With λ = 1 the intent estimate can only reach the robot plan through the
    // ‖uH‖²_RH term; with that weight negligible the plan must not depend on it.
    let s = Scenario::builtin("open").unwrap();
    let cfg = NmpcConfig {
        lambda: 1.0,
        r_h: [1e-12, 1e-12],
        ..NmpcConfig::default()
    };
    let a = nmpc::solve(s.start, &theta(), &s, &cfg, None).unwrap();
    let b = nmpc::solve(s.start, &theta().scaled(3.0), &s, &cfg, None).unwrap();
    assert_ne!(a.human_inputs[0], b.human_inputs[0]);
    let d = (a.robot_inputs[0].to_vector() - b.robot_inputs[0].to_vector()).norm();
    assert!(d <= cfg.qp_tolerance, "{d:e}");
}

fn converged_solve(x0: RobotState, s: &Scenario, cfg: &NmpcConfig) -> nmpc::HorizonSolution {
    let cfg = NmpcConfig {
        max_sqp_iters: 100,
        ..*cfg
    };
    let sol = nmpc::solve(x0, &theta(), s, &cfg, None).unwrap();
    assert!(sol.converged, "viol {:e} after {}", sol.max_constraint_violation, sol.sqp_iterations);
    sol
}

#[test]
fn lab_solution_survives_resimulation() {
    let s = Scenario::builtin("lab_gA").unwrap();
    let cfg = NmpcConfig::default();
    let sol = converged_solve(s.start, &s, &cfg);
    assert_eq!(sol.states[0], s.start);
    let model = HumanModel::new(&s.goal, &s.obstacles, &cfg.dynamics);
    let mut x = s.start;
    for k in 0..cfg.horizon {
        let (ur, uh) = (sol.robot_inputs[k], sol.human_inputs[k]);
        assert!(ur.v.abs() <= cfg.input_bounds.v_max + cfg.qp_tolerance);
        assert!(ur.omega.abs() <= cfg.input_bounds.omega_max + cfg.qp_tolerance);
        let u = VelocityCommand::new(
            cfg.lambda * ur.v + (1.0 - cfg.lambda) * uh.v,
            cfg.lambda * ur.omega + (1.0 - cfg.lambda) * uh.omega,
        );
        let margin = psi(sol.states[k], u, &s.obstacles, &cfg.barrier, &cfg.dynamics)
            .into_iter()
            .fold(f64::INFINITY, f64::min);
        assert!(margin - sol.slacks[k] >= -1e-4, "k={k}");
        assert!(
            model
                .phi_residual(sol.states[k], uh, &theta())
                .unwrap()
                .norm()
                <= 1e-4,
            "k={k}"
        );
        x = step(x, u, &cfg.dynamics);
        let pred = sol.states[k + 1];
        let defect = (x.px - pred.px).hypot(x.py - pred.py);
        assert!(defect <= 1e-4 * (k + 1) as f64, "k={k} defect {defect:e}");
        let one_step = step(sol.states[k], u, &cfg.dynamics);
        assert!(
            (one_step.px - pred.px).hypot(one_step.py - pred.py) <= 1e-4,
            "k={k}"
        );
    }
}

#[test]
fn warm_restart_does_not_raise_cost() {
    let s = Scenario::builtin("lab_gB").unwrap();
    let cfg = NmpcConfig::default();
    let first = nmpc::solve(s.start, &theta(), &s, &cfg, None).unwrap();
    let again = nmpc::solve(s.start, &theta(), &s, &cfg, Some(&first)).unwrap();
    assert!(
        again.cost <= first.cost + cfg.qp_tolerance,
        "{} -> {}",
        first.cost,
        again.cost
    );
}

/// Equality-constrained QP solved through its KKT system.
fn kkt_solve(
    h: &DMatrix<f64>,
    g: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> DVector<f64> {
    let (n, m) = (h.nrows(), a.nrows());
    let mut k = DMatrix::zeros(n + m, n + m);
    k.view_mut((0, 0), (n, n)).copy_from(h);
    k.view_mut((n, 0), (m, n)).copy_from(a);
    k.view_mut((0, n), (n, m)).copy_from(&a.transpose());
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(&(-g));
    rhs.rows_mut(n, m).copy_from(b);
    k.lu()
        .solve(&rhs)
        .expect("nonsingular KKT")
        .rows(0, n)
        .into_owned()
}

#[test]
fn yaw_locked_problem_matches_dense_qp() {
    for (goal_dist, heading, n) in [(0.03, 0.3, 4), (-0.02, -1.2, 5), (0.015, 2.0, 3)] {
        let start = RobotState::new(0.5, -0.2, heading);
        let goal = GoalPose::new(
            start.px + goal_dist * heading.cos(),
            start.py + goal_dist * heading.sin(),
            heading,
        );
        let s = Scenario::new("locked", start, goal, ObstacleSet::empty(0.5), arena()).unwrap();
        let cfg = NmpcConfig {
            horizon: n,
            lambda: 1.0,
            input_bounds: InputBounds {
                v_max: 0.4,
                omega_max: 0.0,
            },
            max_sqp_iters: 50,
            ..NmpcConfig::default()
        };
        let th = theta();
        let nlp = transcribe(start, th, &s, &cfg);
        let l = &nlp.layout;
        let nv = l.n_variables;
        let ts = cfg.dynamics.ts;

        let mut h = DMatrix::zeros(nv, nv);
        let mut g = DVector::zeros(nv);
        let goal_v = [goal.gx, goal.gy, goal.gyaw];
        for k in 0..=n {
            let w = if k < n { cfg.q_r } else { cfg.p_r };
            for i in 0..3 {
                let j = l.state_index(k) + i;
                h[(j, j)] = 2.0 * w[i];
                g[j] = -2.0 * w[i] * goal_v[i];
            }
        }
        for k in 0..n {
            for i in 0..2 {
                let jr = l.robot_input_index(k) + i;
                let jh = l.human_input_index(k) + i;
                h[(jr, jr)] = 2.0 * cfg.r_r[i];
                h[(jh, jh)] = 2.0 * cfg.r_h[i];
            }
            let js = l.slack_index(k);
            h[(js, js)] = 2.0 * cfg.slack_weight;
        }

        let rows = 3 + 3 * n + n + 2 * n;
        let mut a = DMatrix::zeros(rows, nv);
        let mut b = DVector::zeros(rows);
        let mut r = 0;
        for i in 0..3 {
            a[(r, i)] = 1.0;
            b[r] = start.to_vector()[i];
            r += 1;
        }
        let (c, sn) = (heading.cos(), heading.sin());
        for k in 0..n {
            let (xk, xn, ur) = (
                l.state_index(k),
                l.state_index(k + 1),
                l.robot_input_index(k),
            );
            let dir = [c, sn, 0.0];
            for i in 0..3 {
                a[(r, xn + i)] = 1.0;
                a[(r, xk + i)] = -1.0;
                a[(r, ur)] = -ts * dir[i];
                if i == 2 {
                    a[(r, ur + 1)] = -ts;
                }
                r += 1;
            }
            a[(r, ur + 1)] = 1.0;
            r += 1;
        }
        // φ is affine in (x, uH) along the locked heading; take its Jacobians at the start.
        let lin = HumanModel::new(&goal, &s.obstacles, &cfg.dynamics)
            .linearize(&start.to_vector(), &nalgebra::Vector2::zeros(), &th)
            .unwrap();
        for k in 0..n {
            let (xk, uh) = (l.state_index(k), l.human_input_index(k));
            for i in 0..2 {
                for j in 0..3 {
                    a[(r, xk + j)] = lin.d_state[(i, j)];
                }
                for j in 0..2 {
                    a[(r, uh + j)] = lin.d_action[(i, j)];
                }
                b[r] = -lin.phi[i] + (lin.d_state.row(i) * start.to_vector())[0];
                r += 1;
            }
        }
        assert_eq!(r, rows);
        let z_ref = kkt_solve(&h, &g, &a, &b);
        for k in 0..n {
            assert!(
                z_ref[l.robot_input_index(k)].abs() < 0.4,
                "box must stay inactive"
            );
        }

        let sol = nmpc::solve(start, &th, &s, &cfg, None).unwrap();
        assert!(sol.converged);
        let z = nlp.pack(&sol);
        let diff = (&z - &z_ref).amax();
        assert!(diff <= 1e-6, "goal_dist {goal_dist}: {diff:e}");
    }
}

/// Whether some input sequence on a coarse grid keeps every CBF row satisfied with zero slack.
fn unslacked_feasible(s: &Scenario, cfg: &NmpcConfig) -> bool {
    let model = HumanModel::new(&s.goal, &s.obstacles, &cfg.dynamics);
    let levels = |m: f64| [-m, 0.0, m];
    let choices: Vec<VelocityCommand> = levels(cfg.input_bounds.v_max)
        .into_iter()
        .flat_map(|v| levels(cfg.input_bounds.omega_max).map(move |w| VelocityCommand::new(v, w)))
        .collect();
    fn search(
        k: usize,
        x: RobotState,
        s: &Scenario,
        cfg: &NmpcConfig,
        model: &HumanModel,
        choices: &[VelocityCommand],
    ) -> bool {
        if k == cfg.horizon {
            return true;
        }
        let Ok(uh) = model.solve_rational_action(x, &theta(), VelocityCommand::ZERO) else {
            return false;
        };
        choices.iter().any(|&ur| {
            let u = cfg.blended(ur, uh.command);
            psi(x, u, &s.obstacles, &cfg.barrier, &cfg.dynamics)
                .iter()
                .all(|p| *p >= 0.0)
                && search(k + 1, step(x, u, &cfg.dynamics), s, cfg, model, choices)
        })
    }
    search(0, s.start, s, cfg, &model, &choices)
}

/// Largest |δ_k| of converged solutions on small instances whose unslacked problem is feasible.
fn worst_feasible_slack(slack_weight: f64) -> (usize, f64) {
    let mut r = rng(41);
    let mut checked = 0;
    let mut worst = 0.0f64;
    for i in 0..24 {
        let n = 3 + i % 3;
        let n_o = 1 + i % 2;
        let lambda = if i % 4 < 2 { 1.0 } else { 0.35 };
        let start = RobotState::new(0.0, 0.0, r.random_range(-0.3..0.3));
        let centers = (0..n_o)
            .map(|_| Obstacle::new(r.random_range(0.65..1.0), r.random_range(-0.4..0.4)))
            .collect();
        let obstacles = ObstacleSet::new(centers, 0.5).unwrap();
        let goal = GoalPose::new(3.0, r.random_range(-0.5..0.5), 0.0);
        let Ok(s) = Scenario::new("slack", start, goal, obstacles, arena()) else {
            continue;
        };
        let cfg = NmpcConfig {
            horizon: n,
            lambda,
            slack_weight,
            max_sqp_iters: 50,
            ..NmpcConfig::default()
        };
        if !unslacked_feasible(&s, &cfg) {
            continue;
        }
        let sol = nmpc::solve(start, &theta(), &s, &cfg, None).unwrap();
        if !sol.converged {
            continue;
        }
        checked += 1;
        worst = sol.slacks.iter().fold(worst, |m, d| m.max(d.abs()));
    }
    (checked, worst)
}

#[test]
fn slack_vanishes_as_its_weight_grows_on_feasible_problems() {
    // The quadratic penalty is not exact: at w = 1e3 the optimum trades a few
    // centimetres of barrier margin for tracking. Slack use must shrink like 1/w.
    let (n_lo, lo) = worst_feasible_slack(1e3);
    let (n_hi, hi) = worst_feasible_slack(1e7);
    println!("w=1e3: {n_lo} instances, worst |delta| {lo:.3e}; w=1e7: {n_hi} instances, worst {hi:.3e}");
    assert!(n_lo >= 12 && n_hi >= 12);
    assert!(hi <= 1e-3, "{hi:e}");
    assert!(hi <= lo * 1e-2, "{lo:e} -> {hi:e}");
}

#[test]
fn reference_length_matches_horizon() {
    let g = GoalPose::new(1.0, 2.0, 0.5);
    assert_eq!(build_reference(g, 100).poses.len(), 101);
}
