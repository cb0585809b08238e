//! Warm-started SQP with an ℓ1 merit line search.
//!
//! Each iteration linearizes the dynamics, the stationarity condition and the
//! CBF rows around the current iterate. The linearized stationarity condition
//! is solved for the human-input step, `ΔuH_k = e_k + E_k Δx_k`, which turns the
//! subproblem into a stage-wise QP in `Δx_k` and `(ΔuR_k, Δδ_k)` that the
//! Riccati interior-point solver handles in O(N).

use std::time::Instant;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, SMatrix, Vector2, Vector3};

use super::{reference_for, HorizonSolution, NmpcConfig, ReferenceTrajectory};
use crate::dynamics::{input_matrix, state_jacobian, step_vector, RobotState, VelocityCommand};
use crate::error::{Error, Result};
use crate::human_model::{HumanModel, IntentParams};
use crate::qp::ocp::{self, OcpQp, Stage, StageConstraint};
use crate::qp::IpSettings;
use crate::safety::{psi_linearized, smoothed_barrier};
use crate::simulation::Scenario;

/// Trial iterates may not put a predicted position closer than this to an obstacle center.
const CENTER_CLEARANCE: f64 = 1e-3;
const FEASIBILITY_TOL: f64 = 1e-4;
const STEP_TOL: f64 = 1e-6;
const ARMIJO: f64 = 1e-4;
const MIN_STEP: f64 = 1e-8;

#[derive(Debug, Clone)]
struct Iterate {
    x: Vec<Vector3<f64>>,
    ur: Vec<Vector2<f64>>,
    uh: Vec<Vector2<f64>>,
    delta: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
struct Eval {
    cost: f64,
    viol_l1: f64,
    viol_max: f64,
}

struct Direction {
    dx: Vec<Vector3<f64>>,
    dur: Vec<Vector2<f64>>,
    duh: Vec<Vector2<f64>>,
    ddelta: Vec<f64>,
}

impl Direction {
    fn norm_inf(&self) -> f64 {
        let a = self.dx.iter().map(|v| v.amax());
        let b = self.dur.iter().chain(&self.duh).map(|v| v.amax());
        a.chain(b)
            .chain(self.ddelta.iter().map(|v| v.abs()))
            .fold(0.0, f64::max)
    }
}

struct Problem<'a> {
    cfg: &'a NmpcConfig,
    theta: &'a IntentParams,
    model: HumanModel<'a>,
    reference: ReferenceTrajectory,
    x0: Vector3<f64>,
    q: Vector3<f64>,
    p: Vector3<f64>,
    rr: Vector2<f64>,
    rh: Vector2<f64>,
}

impl<'a> Problem<'a> {
    fn blend(&self, ur: &Vector2<f64>, uh: &Vector2<f64>) -> Vector2<f64> {
        self.cfg.lambda * ur + (1.0 - self.cfg.lambda) * uh
    }

    fn ts(&self) -> f64 {
        self.cfg.dynamics.ts
    }

    fn error(&self, k: usize, x: &Vector3<f64>) -> Vector3<f64> {
        self.reference.poses[k].error(x)
    }

    fn clamp_robot(&self, u: Vector2<f64>) -> Vector2<f64> {
        let b = &self.cfg.input_bounds;
        Vector2::new(
            u[0].clamp(-b.v_max, b.v_max),
            u[1].clamp(-b.omega_max, b.omega_max),
        )
    }

    fn min_psi(&self, x: &Vector3<f64>, next: &Vector3<f64>) -> Option<f64> {
        let obs = self.model.obstacles;
        let gamma = self.cfg.barrier.gamma;
        obs.iter()
            .map(|o| {
                let (h0, _) = smoothed_barrier(&x.xy(), &o, obs.d_th);
                let (h1, _) = smoothed_barrier(&next.xy(), &o, obs.d_th);
                h1 - (1.0 - gamma) * h0
            })
            .reduce(f64::min)
    }

    /// States re-simulated from `x0` with each human input moved to the rational action.
    fn rollout(
        &self,
        ur: Vec<Vector2<f64>>,
        uh_guess: &[Vector2<f64>],
        delta_guess: Option<&[f64]>,
    ) -> Iterate {
        let n = ur.len();
        let mut x = Vec::with_capacity(n + 1);
        let mut uh = Vec::with_capacity(n);
        let mut delta = Vec::with_capacity(n);
        x.push(self.x0);
        for k in 0..n {
            let state = RobotState::from_vector(&x[k]);
            let guess = VelocityCommand::from_vector(&uh_guess[k]);
            let action = match self.model.solve_rational_action(state, self.theta, guess) {
                Ok(sol) => sol.command.to_vector(),
                Err(_) if self.model.in_domain(&x[k], &uh_guess[k], CENTER_CLEARANCE) => {
                    uh_guess[k]
                }
                Err(_) => Vector2::zeros(),
            };
            let next = step_vector(&x[k], &self.blend(&ur[k], &action), self.ts());
            let slack = delta_guess.map_or(0.0, |d| d[k]);
            delta.push(self.min_psi(&x[k], &next).map_or(slack, |m| slack.min(m)));
            uh.push(action);
            x.push(next);
        }
        Iterate { x, ur, uh, delta }
    }

    fn in_domain(&self, it: &Iterate) -> bool {
        (0..it.ur.len()).all(|k| self.model.in_domain(&it.x[k], &it.uh[k], CENTER_CLEARANCE))
    }

    fn evaluate(&self, it: &Iterate) -> Option<Eval> {
        let n = it.ur.len();
        let cfg = self.cfg;
        let (mut cost, mut l1, mut linf) = (0.0, 0.0, 0.0_f64);
        let mut add = |v: f64| {
            l1 += v;
            linf = linf.max(v);
        };
        for k in 0..n {
            let (x, ur, uh, d) = (&it.x[k], &it.ur[k], &it.uh[k], it.delta[k]);
            let e = self.error(k, x);
            cost += e.component_mul(&e).dot(&self.q)
                + ur.component_mul(ur).dot(&self.rr)
                + uh.component_mul(uh).dot(&self.rh)
                + cfg.slack_weight * d * d;
            let next = step_vector(x, &self.blend(ur, uh), self.ts());
            for v in (next - it.x[k + 1]).iter() {
                add(v.abs());
            }
            let phi = self.model.phi(x, uh, self.theta).ok()?;
            add(phi[0].abs());
            add(phi[1].abs());
            let obs = self.model.obstacles;
            for o in obs.iter() {
                let (h0, _) = smoothed_barrier(&x.xy(), &o, obs.d_th);
                let (h1, _) = smoothed_barrier(&next.xy(), &o, obs.d_th);
                add((d - (h1 - (1.0 - cfg.barrier.gamma) * h0)).max(0.0));
            }
            let b = &cfg.input_bounds;
            add((ur[0].abs() - b.v_max).max(0.0));
            add((ur[1].abs() - b.omega_max).max(0.0));
        }
        let e = self.error(n, &it.x[n]);
        cost += e.component_mul(&e).dot(&self.p);
        Some(Eval {
            cost,
            viol_l1: l1,
            viol_max: linf,
        })
    }

    /// QP over `(Δx, ΔuR, Δδ)` plus the affine maps recovering `ΔuH`.
    ///
    /// `costates` are dynamics multipliers from the previous subproblem; with them
    /// the convexified curvature of the unicycle map in (yaw, speed) is added to
    /// the Gauss-Newton Hessian.
    fn subproblem(
        &self,
        it: &Iterate,
        costates: Option<&[Vector3<f64>]>,
    ) -> Result<(OcpQp<3, 3>, Vec<(Vector2<f64>, Matrix2x3<f64>)>)> {
        let n = it.ur.len();
        let cfg = self.cfg;
        let lambda = cfg.lambda;
        let ts = self.ts();
        let obs = self.model.obstacles;
        let q2 = Matrix3::from_diagonal(&(2.0 * self.q));
        let rh2 = Matrix2::from_diagonal(&(2.0 * self.rh));
        let mut stages = Vec::with_capacity(n);
        let mut maps = Vec::with_capacity(n);
        for k in 0..n {
            let (x, ur, uh, d) = (&it.x[k], &it.ur[k], &it.uh[k], it.delta[k]);
            let lin = self
                .model
                .linearize(x, uh, self.theta)
                .map_err(|e| Error::SolverFailure(format!("stage {k}: {e}")))?;
            let inv = invert_regularized(&lin.d_action);
            let e_vec = -(inv * lin.phi);
            let e_mat = -(inv * lin.d_state);

            let u = self.blend(ur, uh);
            let next = step_vector(x, &u, ts);
            let fx = state_jacobian(x, &u, ts);
            let fu = input_matrix(RobotState::from_vector(x), ts);
            let a = fx + (1.0 - lambda) * fu * e_mat;
            let mut b = SMatrix::<f64, 3, 3>::zeros();
            b.fixed_view_mut::<3, 2>(0, 0).copy_from(&(lambda * fu));
            let c = next - it.x[k + 1] + (1.0 - lambda) * fu * e_vec;
            let mut st = Stage::new(a, b, c);

            let err = self.error(k, x);
            st.hxx = q2 + e_mat.transpose() * rh2 * e_mat;
            st.qx = q2 * err + e_mat.transpose() * rh2 * (uh + e_vec);
            st.hww = Matrix3::from_diagonal(&Vector3::new(
                2.0 * self.rr[0],
                2.0 * self.rr[1],
                2.0 * cfg.slack_weight,
            ));
            st.qw = Vector3::new(
                2.0 * self.rr[0] * ur[0],
                2.0 * self.rr[1] * ur[1],
                2.0 * cfg.slack_weight * d,
            );
            if let Some(nu) = costates {
                let w = dynamics_curvature(&nu[k + 1], x[2], u[0], ts);
                // (Δyaw, Δv) as an affine function of (Δx, Δw).
                let mut sx = SMatrix::<f64, 2, 3>::zeros();
                sx[(0, 2)] = 1.0;
                sx.set_row(1, &((1.0 - lambda) * e_mat.row(0)));
                let mut sw = SMatrix::<f64, 2, 3>::zeros();
                sw[(1, 0)] = lambda;
                let s0 = Vector2::new(0.0, (1.0 - lambda) * e_vec[0]);
                st.hxx += sx.transpose() * w * sx;
                st.hwx += sw.transpose() * w * sx;
                st.hww += sw.transpose() * w * sw;
                st.qx += sx.transpose() * w * s0;
                st.qw += sw.transpose() * w * s0;
            }

            let fx_xy = fx.fixed_rows::<2>(0).into_owned();
            let fu_xy = fu.fixed_rows::<2>(0).into_owned();
            for o in obs.iter() {
                let (value, dpx, dpu) =
                    psi_linearized(x, &next, &fx_xy, &fu_xy, &o, obs.d_th, cfg.barrier.gamma);
                let gx = dpx.transpose() + (1.0 - lambda) * (e_mat.transpose() * dpu.transpose());
                st.constraints.push(StageConstraint {
                    gx,
                    gw: Vector3::new(lambda * dpu[0], lambda * dpu[1], -1.0),
                    offset: value - d + (1.0 - lambda) * dpu.dot(&e_vec.transpose()),
                });
            }
            let bounds = [cfg.input_bounds.v_max, cfg.input_bounds.omega_max];
            for j in 0..2 {
                if bounds[j] > 0.0 {
                    let mut unit = Vector3::zeros();
                    unit[j] = 1.0;
                    st.constraints.push(StageConstraint {
                        gx: Vector3::zeros(),
                        gw: -unit,
                        offset: bounds[j] - ur[j],
                    });
                    st.constraints.push(StageConstraint {
                        gx: Vector3::zeros(),
                        gw: unit,
                        offset: bounds[j] + ur[j],
                    });
                } else {
                    st.fixed[j] = Some(-ur[j]);
                }
            }
            stages.push(st);
            maps.push((e_vec, e_mat));
        }
        let err_n = self.error(n, &it.x[n]);
        let p2 = Matrix3::from_diagonal(&(2.0 * self.p));
        Ok((
            OcpQp {
                x0: Vector3::zeros(),
                stages,
                terminal_hess: p2,
                terminal_grad: p2 * err_n,
            },
            maps,
        ))
    }

    fn cost_slope_and_curvature(&self, it: &Iterate, d: &Direction) -> (f64, f64) {
        let n = it.ur.len();
        let w = self.cfg.slack_weight;
        let (mut slope, mut curv) = (0.0, 0.0);
        for k in 0..n {
            let e = self.error(k, &it.x[k]);
            slope += 2.0 * e.component_mul(&self.q).dot(&d.dx[k])
                + 2.0 * it.ur[k].component_mul(&self.rr).dot(&d.dur[k])
                + 2.0 * it.uh[k].component_mul(&self.rh).dot(&d.duh[k])
                + 2.0 * w * it.delta[k] * d.ddelta[k];
            curv += 2.0 * d.dx[k].component_mul(&d.dx[k]).dot(&self.q)
                + 2.0 * d.dur[k].component_mul(&d.dur[k]).dot(&self.rr)
                + 2.0 * d.duh[k].component_mul(&d.duh[k]).dot(&self.rh)
                + 2.0 * w * d.ddelta[k] * d.ddelta[k];
        }
        let e = self.error(n, &it.x[n]);
        slope += 2.0 * e.component_mul(&self.p).dot(&d.dx[n]);
        curv += 2.0 * d.dx[n].component_mul(&d.dx[n]).dot(&self.p);
        (slope, curv)
    }

    fn to_solution(&self, it: &Iterate, ev: Eval) -> HorizonSolution {
        HorizonSolution {
            states: it
                .x
                .iter()
                .map(|x| RobotState::from_vector(x).canonical())
                .collect(),
            robot_inputs: it.ur.iter().map(VelocityCommand::from_vector).collect(),
            human_inputs: it.uh.iter().map(VelocityCommand::from_vector).collect(),
            slacks: it.delta.clone(),
            sqp_iterations: 0,
            max_constraint_violation: ev.viol_max,
            solve_time: 0.0,
            converged: false,
            cost: ev.cost,
        }
    }
}

/// PSD part of `−νᵀ ∇²f` over (yaw, speed) for the Euler unicycle step.
fn dynamics_curvature(nu: &Vector3<f64>, yaw: f64, v: f64, ts: f64) -> Matrix2<f64> {
    let (s, c) = yaw.sin_cos();
    let aa = ts * v * (nu[0] * c + nu[1] * s);
    let av = ts * (nu[0] * s - nu[1] * c);
    let eig = Matrix2::new(aa, av, av, 0.0).symmetric_eigen();
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    eig.eigenvectors * Matrix2::from_diagonal(&clipped) * eig.eigenvectors.transpose()
}

/// Dynamics multipliers of a solved subproblem, `ν_1..ν_N` at indices `1..=N`.
fn costates(qp: &OcpQp<3, 3>, sol: &ocp::OcpSolution<3, 3>) -> Vec<Vector3<f64>> {
    let n = qp.stages.len();
    let mut nu = vec![Vector3::zeros(); n + 1];
    nu[n] = -(qp.terminal_hess * sol.xs[n] + qp.terminal_grad);
    let mut idx: usize = qp.stages.iter().map(|s| s.constraints.len()).sum();
    for k in (1..n).rev() {
        let st = &qp.stages[k];
        idx -= st.constraints.len();
        let mut g = st.hxx * sol.xs[k] + st.qx + st.hwx.transpose() * sol.ws[k];
        for (i, row) in st.constraints.iter().enumerate() {
            g -= sol.multipliers[idx + i] * row.gx;
        }
        nu[k] = st.a.transpose() * nu[k + 1] - g;
    }
    nu
}

fn invert_regularized(m: &Matrix2<f64>) -> Matrix2<f64> {
    let mut reg = 0.0;
    loop {
        let shifted = m + Matrix2::identity() * reg;
        if let Some(inv) = shifted.try_inverse() {
            if inv.iter().all(|v| v.is_finite()) && inv.amax() < 1e12 {
                return inv;
            }
        }
        reg = if reg == 0.0 { 1e-10 } else { reg * 10.0 };
    }
}

fn apply(it: &Iterate, d: &Direction, alpha: f64) -> Iterate {
    Iterate {
        x: it.x.iter().zip(&d.dx).map(|(a, b)| a + alpha * b).collect(),
        ur: it
            .ur
            .iter()
            .zip(&d.dur)
            .map(|(a, b)| a + alpha * b)
            .collect(),
        uh: it
            .uh
            .iter()
            .zip(&d.duh)
            .map(|(a, b)| a + alpha * b)
            .collect(),
        delta: it
            .delta
            .iter()
            .zip(&d.ddelta)
            .map(|(a, b)| a + alpha * b)
            .collect(),
    }
}

fn better(candidate: &Eval, incumbent: &Eval) -> bool {
    let cf = candidate.viol_max <= FEASIBILITY_TOL;
    let inf = incumbent.viol_max <= FEASIBILITY_TOL;
    match (cf, inf) {
        (true, true) => candidate.cost < incumbent.cost,
        (true, false) => true,
        (false, true) => false,
        (false, false) => candidate.viol_max < incumbent.viol_max,
    }
}

/// Solves the horizon problem from measurement `x0`.
///
/// `warm` is used as the initial guess when its horizon matches; the states are
/// always re-simulated from `x0`, each human input is moved to the rational
/// action, and each slack is lowered until the CBF rows hold.
pub fn solve(
    x0: RobotState,
    theta: &IntentParams,
    scenario: &Scenario,
    cfg: &NmpcConfig,
    warm: Option<&HorizonSolution>,
) -> Result<HorizonSolution> {
    let started = Instant::now();
    cfg.validate()?;
    theta.validate()?;
    if !x0.is_finite() {
        return Err(Error::validation("x0", "must be finite"));
    }
    let n = cfg.horizon;
    let problem = Problem {
        cfg,
        theta,
        model: HumanModel::new(&scenario.goal, &scenario.obstacles, &cfg.dynamics),
        reference: reference_for(x0, scenario.goal, cfg),
        x0: x0.to_vector(),
        q: Vector3::from(cfg.q_r),
        p: Vector3::from(cfg.p_r),
        rr: Vector2::from(cfg.r_r),
        rh: Vector2::from(cfg.r_h),
    };

    let mut it = match warm.filter(|w| w.horizon() == n && w.slacks.len() == n) {
        Some(w) => {
            let ur = w
                .robot_inputs
                .iter()
                .map(|u| problem.clamp_robot(u.to_vector()))
                .collect();
            let uh: Vec<_> = w.human_inputs.iter().map(|u| u.to_vector()).collect();
            problem.rollout(ur, &uh, Some(&w.slacks))
        }
        None => problem.rollout(vec![Vector2::zeros(); n], &vec![Vector2::zeros(); n], None),
    };
    let mut ev = problem.evaluate(&it).ok_or_else(|| {
        Error::SolverFailure("initial guess outside the value-function domain".into())
    })?;

    let settings = IpSettings {
        tolerance: cfg.qp_tolerance,
        ..IpSettings::default()
    };
    let mut best = (it.clone(), ev, false);
    let mut rho: f64 = 1.0;
    let mut iterations = 0;
    let mut converged = false;
    let mut nu: Option<Vec<Vector3<f64>>> = None;
    while iterations < cfg.max_sqp_iters {
        let subproblem = problem.subproblem(&it, nu.as_deref());
        let (qp, maps, sol) = match subproblem
            .and_then(|(qp, maps)| ocp::solve(&qp, &settings).map(|sol| (qp, maps, sol)))
        {
            Ok(v) => v,
            Err(e) if iterations == 0 => return Err(e),
            Err(_) => break,
        };
        nu = Some(costates(&qp, &sol));
        let d = Direction {
            duh: (0..n).map(|k| maps[k].0 + maps[k].1 * sol.xs[k]).collect(),
            dur: sol
                .ws
                .iter()
                .map(|w| w.fixed_rows::<2>(0).into_owned())
                .collect(),
            ddelta: sol.ws.iter().map(|w| w[2]).collect(),
            dx: sol.xs,
        };
        let step_norm = d.norm_inf();

        let (slope, curv) = problem.cost_slope_and_curvature(&it, &d);
        if ev.viol_l1 > 0.0 {
            rho = rho.max((slope + 0.5 * curv) / (0.9 * ev.viol_l1));
        }
        let merit0 = ev.cost + rho * ev.viol_l1;
        let descent = slope - rho * ev.viol_l1;

        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha >= MIN_STEP {
            let trial = apply(&it, &d, alpha);
            if problem.in_domain(&trial) {
                if let Some(te) = problem.evaluate(&trial) {
                    let merit = te.cost + rho * te.viol_l1;
                    if merit <= merit0 + ARMIJO * alpha * descent.min(0.0)
                        || step_norm * alpha <= STEP_TOL
                    {
                        accepted = Some((trial, te));
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }
        let Some((mut trial, mut te)) = accepted else {
            break;
        };
        // Re-simulating the robot inputs gives a feasible point; keep it when the
        // merit function prefers it.
        if te.viol_max > FEASIBILITY_TOL {
            let ur = trial.ur.iter().map(|u| problem.clamp_robot(*u)).collect();
            let projected = problem.rollout(ur, &trial.uh, Some(&trial.delta));
            if let Some(pe) = problem.evaluate(&projected) {
                if pe.cost + rho * pe.viol_l1 < te.cost + rho * te.viol_l1 {
                    trial = projected;
                    te = pe;
                } else if better(&pe, &best.1) {
                    best = (projected, pe, false);
                }
            }
        }
        iterations += 1;
        it = trial;
        ev = te;
        let done = step_norm <= STEP_TOL && ev.viol_max <= FEASIBILITY_TOL;
        if better(&ev, &best.1) || done {
            best = (it.clone(), ev, done);
        }
        if done {
            converged = true;
            break;
        }
    }

    let mut out = problem.to_solution(&best.0, best.1);
    out.sqp_iterations = iterations;
    out.converged = converged && best.2;
    out.solve_time = started.elapsed().as_secs_f64();
    Ok(out)
}
