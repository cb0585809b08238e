//! Parameterized human state–action value function.
//!
//! The operator is modeled as noisily rational: actions are drawn with density
//! proportional to `exp(−β Q(x, uH, θ))`, where
//!
//! ```text
//! Q = ‖f(x,uH) − g‖²_M(θ1) + ‖uH‖²_M(θ2) − θ3 Σ_ℓ ln(‖f_xy(x,uH) − o_ℓ‖² / d_th²)
//! ```
//!
//! The rational action is the stationary point `φ(x, uH, θ) = ∇_uH Q = 0`. The
//! residual and its Jacobians with respect to the action, the state and the
//! parameters are all analytic; the NMPC linearizes the stationarity constraint
//! with them and the adaptation law differentiates through it.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Matrix3x2, SMatrix, SVector, Vector2, Vector3};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    angle_diff, input_matrix, state_jacobian, step_vector, DynamicsConfig, RobotState,
    VelocityCommand,
};
use crate::error::{Error, Result};

/// Lower bound applied to every value-function weight.
pub const EPSILON_THETA: f64 = 1e-3;

/// Stationarity tolerance that `solve_rational_action` guarantees.
pub const RATIONAL_TOLERANCE: f64 = 1e-8;

const NEWTON_MAX_ITERS: usize = 50;

pub type ParamVector = SVector<f64, 5>;
pub type Matrix2x5 = SMatrix<f64, 2, 5>;

/// Weights of the human value function.
///
/// Index order everywhere a 5-vector is used: goal x, goal y, goal yaw,
/// effort, barrier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntentParams {
    pub theta1_x: f64,
    pub theta1_y: f64,
    pub theta1_yaw: f64,
    pub theta2: f64,
    pub theta3: f64,
}

impl IntentParams {
    pub fn new(
        theta1_x: f64,
        theta1_y: f64,
        theta1_yaw: f64,
        theta2: f64,
        theta3: f64,
    ) -> Result<Self> {
        let p = Self {
            theta1_x,
            theta1_y,
            theta1_yaw,
            theta2,
            theta3,
        };
        p.validate()?;
        Ok(p)
    }

    /// Four-parameter form with a shared planar goal weight.
    pub fn tied(theta1_xy: f64, theta1_yaw: f64, theta2: f64, theta3: f64) -> Result<Self> {
        Self::new(theta1_xy, theta1_xy, theta1_yaw, theta2, theta3)
    }

    /// Initial estimate used by the adaptive controller: θ1 = (0.4, 0.4, 5), θ2 = 2, θ3 = 2.
    pub fn initial_estimate() -> Self {
        Self {
            theta1_x: 0.4,
            theta1_y: 0.4,
            theta1_yaw: 5.0,
            theta2: 2.0,
            theta3: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in Self::NAMES.iter().zip(self.to_vector().iter()) {
            if !v.is_finite() || *v < EPSILON_THETA {
                return Err(Error::validation(
                    *name,
                    format!("must be finite and at least {EPSILON_THETA}, got {v}"),
                ));
            }
        }
        Ok(())
    }

    pub const NAMES: [&'static str; 5] = ["theta1_x", "theta1_y", "theta1_yaw", "theta2", "theta3"];

    pub fn to_vector(&self) -> ParamVector {
        ParamVector::new(
            self.theta1_x,
            self.theta1_y,
            self.theta1_yaw,
            self.theta2,
            self.theta3,
        )
    }

    /// Unchecked conversion; callers project onto the admissible box first.
    pub fn from_vector(v: &ParamVector) -> Self {
        Self {
            theta1_x: v[0],
            theta1_y: v[1],
            theta1_yaw: v[2],
            theta2: v[3],
            theta3: v[4],
        }
    }

    pub fn to_array(&self) -> [f64; 5] {
        [
            self.theta1_x,
            self.theta1_y,
            self.theta1_yaw,
            self.theta2,
            self.theta3,
        ]
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self::from_vector(&(self.to_vector() * c))
    }

    fn goal_weights(&self) -> Vector3<f64> {
        Vector3::new(self.theta1_x, self.theta1_y, self.theta1_yaw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GoalPose {
    #[serde(rename = "x")]
    pub gx: f64,
    #[serde(rename = "y")]
    pub gy: f64,
    #[serde(rename = "yaw")]
    pub gyaw: f64,
}

impl GoalPose {
    pub const fn new(gx: f64, gy: f64, gyaw: f64) -> Self {
        Self { gx, gy, gyaw }
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.gx, self.gy)
    }

    /// Tracking error of a pose relative to this goal, yaw taken the short way.
    pub fn error(&self, x: &Vector3<f64>) -> Vector3<f64> {
        Vector3::new(x[0] - self.gx, x[1] - self.gy, angle_diff(x[2], self.gyaw))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub x: f64,
    pub y: f64,
}

impl Obstacle {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn center(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }
}

/// Static obstacle centers with a shared keep-out radius `d_th`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstacleSet {
    pub centers: Vec<Obstacle>,
    pub d_th: f64,
}

impl ObstacleSet {
    pub fn new(centers: Vec<Obstacle>, d_th: f64) -> Result<Self> {
        if !(d_th > 0.0 && d_th.is_finite()) {
            return Err(Error::validation(
                "d_th",
                format!("must be positive, got {d_th}"),
            ));
        }
        Ok(Self { centers, d_th })
    }

    pub fn empty(d_th: f64) -> Self {
        Self {
            centers: Vec::new(),
            d_th,
        }
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = Vector2<f64>> + '_ {
        self.centers.iter().map(Obstacle::center)
    }
}

/// Rationality coefficient β ≥ 0 of the Boltzmann action model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct RationalityCoefficient(f64);

impl RationalityCoefficient {
    pub fn new(beta: f64) -> Result<Self> {
        if beta >= 0.0 && beta.is_finite() {
            Ok(Self(beta))
        } else {
            Err(Error::validation(
                "beta",
                format!("must be finite and non-negative, got {beta}"),
            ))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for RationalityCoefficient {
    type Error = Error;

    fn try_from(v: f64) -> Result<Self> {
        Self::new(v)
    }
}

impl From<RationalityCoefficient> for f64 {
    fn from(b: RationalityCoefficient) -> f64 {
        b.0
    }
}

/// Stationarity residual and its Jacobians at one point.
#[derive(Debug, Clone, Copy)]
pub struct Linearization {
    pub phi: Vector2<f64>,
    pub d_action: Matrix2<f64>,
    pub d_state: Matrix2x3<f64>,
    pub d_theta: Matrix2x5,
}

/// Outcome of the damped Newton solve for the rational action.
#[derive(Debug, Clone, Copy)]
pub struct RationalAction {
    pub command: VelocityCommand,
    pub iterations: usize,
    pub residual: f64,
}

/// The value function bound to one environment (goal, obstacles, sampling period).
#[derive(Debug, Clone, Copy)]
pub struct HumanModel<'a> {
    pub goal: &'a GoalPose,
    pub obstacles: &'a ObstacleSet,
    pub ts: f64,
}

struct Offsets {
    /// Predicted planar offsets to each obstacle and their squared norms.
    rel: Vec<(Vector2<f64>, f64)>,
}

impl<'a> HumanModel<'a> {
    pub fn new(goal: &'a GoalPose, obstacles: &'a ObstacleSet, cfg: &DynamicsConfig) -> Self {
        Self {
            goal,
            obstacles,
            ts: cfg.ts,
        }
    }

    fn offsets(&self, next: &Vector3<f64>) -> Result<Offsets> {
        let mut rel = Vec::with_capacity(self.obstacles.len());
        for o in self.obstacles.iter() {
            let r = Vector2::new(next[0] - o[0], next[1] - o[1]);
            let r2 = r.norm_squared();
            if !(r2 > 0.0) {
                return Err(Error::Domain(format!(
                    "predicted position ({:.6}, {:.6}) coincides with obstacle center",
                    next[0], next[1]
                )));
            }
            rel.push((r, r2));
        }
        Ok(Offsets { rel })
    }

    /// Whether the predicted position under `u` avoids every obstacle center by more than `margin`.
    pub fn in_domain(&self, x: &Vector3<f64>, u: &Vector2<f64>, margin: f64) -> bool {
        let next = step_vector(x, u, self.ts);
        let m2 = margin * margin;
        next.iter().all(|v| v.is_finite())
            && self
                .obstacles
                .iter()
                .all(|o| (Vector2::new(next[0], next[1]) - o).norm_squared() > m2)
    }

    pub fn q_value(&self, x: RobotState, u: VelocityCommand, theta: &IntentParams) -> Result<f64> {
        self.q_value_vec(&x.to_vector(), &u.to_vector(), theta)
    }

    pub fn q_value_vec(
        &self,
        x: &Vector3<f64>,
        u: &Vector2<f64>,
        theta: &IntentParams,
    ) -> Result<f64> {
        let next = step_vector(x, u, self.ts);
        let off = self.offsets(&next)?;
        let e = self.goal.error(&next);
        let goal_term = e.component_mul(&e).dot(&theta.goal_weights());
        let effort = theta.theta2 * u.norm_squared();
        let d2 = self.obstacles.d_th * self.obstacles.d_th;
        let barrier: f64 = off.rel.iter().map(|(_, r2)| (r2 / d2).ln()).sum();
        Ok(goal_term + effort - theta.theta3 * barrier)
    }

    /// ∇_u Q at (x, u).
    pub fn phi(
        &self,
        x: &Vector3<f64>,
        u: &Vector2<f64>,
        theta: &IntentParams,
    ) -> Result<Vector2<f64>> {
        let next = step_vector(x, u, self.ts);
        let off = self.offsets(&next)?;
        let b = input_matrix(RobotState::from_vector(x), self.ts);
        let e = self.goal.error(&next);
        let mut phi =
            2.0 * b.transpose() * e.component_mul(&theta.goal_weights()) + 2.0 * theta.theta2 * u;
        let (s, c) = x[2].sin_cos();
        for (r, r2) in &off.rel {
            // B_xyᵀ r only has a linear-velocity component.
            phi[0] -= 2.0 * theta.theta3 * self.ts * (c * r[0] + s * r[1]) / r2;
        }
        Ok(phi)
    }

    pub fn phi_residual(
        &self,
        x: RobotState,
        u: VelocityCommand,
        theta: &IntentParams,
    ) -> Result<Vector2<f64>> {
        self.phi(&x.to_vector(), &u.to_vector(), theta)
    }

    /// Residual with all analytic Jacobians.
    pub fn linearize(
        &self,
        x: &Vector3<f64>,
        u: &Vector2<f64>,
        theta: &IntentParams,
    ) -> Result<Linearization> {
        let ts = self.ts;
        let next = step_vector(x, u, ts);
        let off = self.offsets(&next)?;
        let b = input_matrix(RobotState::from_vector(x), ts);
        let (s, c) = x[2].sin_cos();
        let db_dyaw = Matrix3x2::new(-ts * s, 0.0, ts * c, 0.0, 0.0, 0.0);
        let fx = state_jacobian(x, u, ts);
        let w1 = theta.goal_weights();
        let m1 = Matrix3::from_diagonal(&w1);
        let e = self.goal.error(&next);
        let m1e = m1 * e;

        let mut phi = 2.0 * b.transpose() * m1e + 2.0 * theta.theta2 * u;
        let mut d_action = 2.0 * b.transpose() * m1 * b + 2.0 * theta.theta2 * Matrix2::identity();
        let mut d_state = 2.0 * b.transpose() * m1 * fx;
        let yaw_col = 2.0 * db_dyaw.transpose() * m1e;
        d_state[(0, 2)] += yaw_col[0];
        d_state[(1, 2)] += yaw_col[1];

        let mut d_theta = Matrix2x5::zeros();
        for i in 0..3 {
            let col = 2.0 * e[i] * b.row(i).transpose();
            d_theta.set_column(i, &col);
        }
        d_theta.set_column(3, &(2.0 * u));

        let bxy = b.fixed_rows::<2>(0).into_owned();
        let fx_xy = fx.fixed_rows::<2>(0).into_owned();
        let dbxy_dyaw = db_dyaw.fixed_rows::<2>(0).into_owned();
        let mut barrier_sum = Vector2::zeros();
        let mut barrier_hess_u = Matrix2::zeros();
        let mut barrier_hess_x = Matrix2x3::zeros();
        for (r, r2) in &off.rel {
            let g = bxy.transpose() * r / *r2;
            barrier_sum += g;
            // ∂(r/‖r‖²)/∂r
            let dn = Matrix2::identity() / *r2 - 2.0 * r * r.transpose() / (r2 * r2);
            barrier_hess_u += bxy.transpose() * dn * bxy;
            let mut hx = bxy.transpose() * dn * fx_xy;
            let yaw_term = dbxy_dyaw.transpose() * r / *r2;
            hx[(0, 2)] += yaw_term[0];
            hx[(1, 2)] += yaw_term[1];
            barrier_hess_x += hx;
        }
        let k = 2.0 * theta.theta3;
        phi -= k * barrier_sum;
        d_action -= k * barrier_hess_u;
        d_state -= k * barrier_hess_x;
        d_theta.set_column(4, &(-2.0 * barrier_sum));

        Ok(Linearization {
            phi,
            d_action,
            d_state,
            d_theta,
        })
    }

    pub fn phi_jacobian_u(
        &self,
        x: RobotState,
        u: VelocityCommand,
        theta: &IntentParams,
    ) -> Result<Matrix2<f64>> {
        Ok(self
            .linearize(&x.to_vector(), &u.to_vector(), theta)?
            .d_action)
    }

    pub fn phi_jacobian_theta(
        &self,
        x: RobotState,
        u: VelocityCommand,
        theta: &IntentParams,
    ) -> Result<Matrix2x5> {
        Ok(self
            .linearize(&x.to_vector(), &u.to_vector(), theta)?
            .d_theta)
    }

    /// Damped Newton iteration on `φ = 0` started from `u0`.
    ///
    /// A trial step is halved until the predicted position stays off every obstacle
    /// center and ‖φ‖ decreases.
    pub fn solve_rational_action(
        &self,
        x: RobotState,
        theta: &IntentParams,
        u0: VelocityCommand,
    ) -> Result<RationalAction> {
        let xv = x.to_vector();
        let mut u = u0.to_vector();
        if !u.iter().all(|v| v.is_finite()) || self.phi(&xv, &u, theta).is_err() {
            u = Vector2::zeros();
            if self.phi(&xv, &u, theta).is_err() {
                return Err(Error::Domain("no feasible starting action".into()));
            }
        }
        let mut lin = self.linearize(&xv, &u, theta)?;
        let mut norm = lin.phi.norm();
        let mut iterations = 0;
        while iterations < NEWTON_MAX_ITERS && norm > 1e-13 {
            let step = match lin.d_action.lu().solve(&(-lin.phi)) {
                Some(d) if d.iter().all(|v| v.is_finite()) => d,
                _ => -lin.phi,
            };
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..60 {
                let trial = u + alpha * step;
                if let Ok(p) = self.phi(&xv, &trial, theta) {
                    if p.norm() < norm {
                        accepted = Some(trial);
                        break;
                    }
                }
                alpha *= 0.5;
            }
            let Some(next) = accepted else { break };
            iterations += 1;
            u = next;
            lin = self.linearize(&xv, &u, theta)?;
            norm = lin.phi.norm();
        }
        if norm < RATIONAL_TOLERANCE {
            Ok(RationalAction {
                command: VelocityCommand::from_vector(&u),
                iterations,
                residual: norm,
            })
        } else {
            Err(Error::Convergence {
                iterations,
                residual: norm,
            })
        }
    }

    /// Draws one action from the Boltzmann density discretized on `grid`.
    pub fn sample_boltzmann_action(
        &self,
        x: RobotState,
        theta: &IntentParams,
        beta: RationalityCoefficient,
        grid: &ActionGrid,
        seed: u64,
    ) -> Result<VelocityCommand> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = self.boltzmann_distribution(x, theta, beta, grid)?;
        Ok(dist.sample(&mut rng))
    }

    pub fn boltzmann_distribution(
        &self,
        x: RobotState,
        theta: &IntentParams,
        beta: RationalityCoefficient,
        grid: &ActionGrid,
    ) -> Result<BoltzmannGrid> {
        let xv = x.to_vector();
        let cells = grid.cells();
        let values: Vec<Option<f64>> = cells
            .iter()
            .map(|u| self.q_value_vec(&xv, &u.to_vector(), theta).ok())
            .collect();
        let q_min = values
            .iter()
            .flatten()
            .copied()
            .fold(f64::INFINITY, f64::min);
        if !q_min.is_finite() {
            return Err(Error::DegenerateDistribution);
        }
        let b = beta.value();
        let weights: Vec<f64> = values
            .iter()
            .map(|q| q.map_or(0.0, |q| (-b * (q - q_min)).exp()))
            .collect();
        let index = WeightedIndex::new(&weights).map_err(|_| Error::DegenerateDistribution)?;
        Ok(BoltzmannGrid {
            cells,
            weights,
            index,
        })
    }
}

/// Regular grid over the admissible input box; cell centers include the box corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionGrid {
    pub v_max: f64,
    pub omega_max: f64,
    pub points_per_axis: usize,
}

impl Default for ActionGrid {
    fn default() -> Self {
        Self {
            v_max: 0.4,
            omega_max: 0.8,
            points_per_axis: 41,
        }
    }
}

impl ActionGrid {
    pub fn spacing(&self) -> (f64, f64) {
        let n = (self.points_per_axis.max(2) - 1) as f64;
        (2.0 * self.v_max / n, 2.0 * self.omega_max / n)
    }

    pub fn cells(&self) -> Vec<VelocityCommand> {
        let n = self.points_per_axis.max(2);
        let (dv, dw) = self.spacing();
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                out.push(VelocityCommand::new(
                    -self.v_max + dv * i as f64,
                    -self.omega_max + dw * j as f64,
                ));
            }
        }
        out
    }
}

/// Normalized Boltzmann weights over an [`ActionGrid`].
#[derive(Debug, Clone)]
pub struct BoltzmannGrid {
    pub cells: Vec<VelocityCommand>,
    pub weights: Vec<f64>,
    index: WeightedIndex<f64>,
}

impl BoltzmannGrid {
    pub fn probabilities(&self) -> Vec<f64> {
        let total: f64 = self.weights.iter().sum();
        self.weights.iter().map(|w| w / total).collect()
    }

    pub fn sample_index<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.index.sample(rng)
    }
}

impl Distribution<VelocityCommand> for BoltzmannGrid {
    fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> VelocityCommand {
        self.cells[self.index.sample(rng)]
    }
}

pub fn q_value(
    x: RobotState,
    u_h: VelocityCommand,
    theta: &IntentParams,
    goal: &GoalPose,
    obs: &ObstacleSet,
    cfg: &DynamicsConfig,
) -> Result<f64> {
    HumanModel::new(goal, obs, cfg).q_value(x, u_h, theta)
}

pub fn phi_residual(
    x: RobotState,
    u_h: VelocityCommand,
    theta: &IntentParams,
    goal: &GoalPose,
    obs: &ObstacleSet,
    cfg: &DynamicsConfig,
) -> Result<Vector2<f64>> {
    HumanModel::new(goal, obs, cfg).phi_residual(x, u_h, theta)
}

pub fn phi_jacobian_u(
    x: RobotState,
    u_h: VelocityCommand,
    theta: &IntentParams,
    goal: &GoalPose,
    obs: &ObstacleSet,
    cfg: &DynamicsConfig,
) -> Result<Matrix2<f64>> {
    HumanModel::new(goal, obs, cfg).phi_jacobian_u(x, u_h, theta)
}

pub fn phi_jacobian_theta(
    x: RobotState,
    u_h: VelocityCommand,
    theta: &IntentParams,
    goal: &GoalPose,
    obs: &ObstacleSet,
    cfg: &DynamicsConfig,
) -> Result<Matrix2x5> {
    HumanModel::new(goal, obs, cfg).phi_jacobian_theta(x, u_h, theta)
}

pub fn solve_rational_action(
    x: RobotState,
    theta: &IntentParams,
    goal: &GoalPose,
    obs: &ObstacleSet,
    cfg: &DynamicsConfig,
    u0: VelocityCommand,
) -> Result<VelocityCommand> {
    HumanModel::new(goal, obs, cfg)
        .solve_rational_action(x, theta, u0)
        .map(|a| a.command)
}

pub fn sample_boltzmann_action(
    x: RobotState,
    theta: &IntentParams,
    beta: RationalityCoefficient,
    goal: &GoalPose,
    obs: &ObstacleSet,
    cfg: &DynamicsConfig,
    seed: u64,
) -> Result<VelocityCommand> {
    HumanModel::new(goal, obs, cfg).sample_boltzmann_action(
        x,
        theta,
        beta,
        &ActionGrid::default(),
        seed,
    )
}
