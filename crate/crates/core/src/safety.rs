//! Safe set, barrier vector `h` and the one-step discrete-time CBF condition.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{step_vector, DynamicsConfig, RobotState, VelocityCommand};
use crate::error::{Error, Result};
use crate::human_model::ObstacleSet;

/// Added under the square root when the optimizer needs a gradient of `h`.
pub const DISTANCE_SMOOTHING: f64 = 1e-12;

/// Linear class-K decay `γ(s) = gamma·s`. The keep-out radius lives on [`ObstacleSet`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarrierConfig {
    pub gamma: f64,
}

impl Default for BarrierConfig {
    fn default() -> Self {
        Self { gamma: 0.1 }
    }
}

impl BarrierConfig {
    pub fn new(gamma: f64) -> Result<Self> {
        if gamma > 0.0 && gamma < 1.0 {
            Ok(Self { gamma })
        } else {
            Err(Error::validation(
                "gamma",
                format!("must lie in (0, 1), got {gamma}"),
            ))
        }
    }

    pub fn class_k(&self, s: f64) -> f64 {
        self.gamma * s
    }
}

/// `h_ℓ(x) = ‖p − o_ℓ‖ − d_th` for every obstacle.
pub fn h_values(x: RobotState, obs: &ObstacleSet) -> Vec<f64> {
    let p = x.position();
    obs.iter().map(|o| (p - o).norm() - obs.d_th).collect()
}

pub fn is_safe(x: RobotState, obs: &ObstacleSet) -> bool {
    h_values(x, obs).iter().all(|&h| h >= 0.0)
}

/// `h(f(x,u)) − h(x) + γ h(x)` per obstacle; the CBF condition holds iff all are ≥ 0.
pub fn psi(
    x: RobotState,
    u: VelocityCommand,
    obs: &ObstacleSet,
    bcfg: &BarrierConfig,
    dcfg: &DynamicsConfig,
) -> Vec<f64> {
    let next = step_vector(&x.to_vector(), &u.to_vector(), dcfg.ts);
    let h_now = h_values(x, obs);
    let h_next = h_values(RobotState::from_vector(&next), obs);
    h_next
        .iter()
        .zip(&h_now)
        .map(|(hn, h)| hn - h + bcfg.class_k(*h))
        .collect()
}

pub fn min_or_none(values: &[f64]) -> Option<f64> {
    values.iter().copied().reduce(f64::min)
}

/// Smoothed `h` and its gradient with respect to the planar position.
pub(crate) fn smoothed_barrier(
    p: &Vector2<f64>,
    o: &Vector2<f64>,
    d_th: f64,
) -> (f64, Vector2<f64>) {
    let r = p - o;
    let dist = (r.norm_squared() + DISTANCE_SMOOTHING).sqrt();
    (dist - d_th, r / dist)
}

/// ψ for one obstacle on raw vectors, with gradients in x and in the applied input.
pub(crate) fn psi_linearized(
    x: &Vector3<f64>,
    next: &Vector3<f64>,
    fx_xy: &nalgebra::Matrix2x3<f64>,
    fu_xy: &nalgebra::Matrix2<f64>,
    o: &Vector2<f64>,
    d_th: f64,
    gamma: f64,
) -> (f64, nalgebra::RowVector3<f64>, nalgebra::RowVector2<f64>) {
    let (h0, g0) = smoothed_barrier(&Vector2::new(x[0], x[1]), o, d_th);
    let (h1, g1) = smoothed_barrier(&Vector2::new(next[0], next[1]), o, d_th);
    let value = h1 - (1.0 - gamma) * h0;
    let mut dx = g1.transpose() * fx_xy;
    dx[0] -= (1.0 - gamma) * g0[0];
    dx[1] -= (1.0 - gamma) * g0[1];
    let du = g1.transpose() * fu_xy;
    (value, dx, du)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::step;
    use crate::human_model::Obstacle;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    const DCFG: DynamicsConfig = DynamicsConfig { ts: 0.1 };

    fn one(ox: f64, oy: f64) -> ObstacleSet {
        ObstacleSet::new(vec![Obstacle::new(ox, oy)], 0.5).unwrap()
    }

    #[test]
    fn h_examples() {
        assert_eq!(h_values(RobotState::default(), &one(1.0, 0.0)), vec![0.5]);
        let h = h_values(RobotState::new(0.5, 0.0, 1.0), &one(1.0, 0.0));
        assert_abs_diff_eq!(h[0], 0.0, epsilon = 1e-15);
        assert!(h_values(RobotState::default(), &ObstacleSet::empty(0.5)).is_empty());
    }

    #[test]
    fn safe_set_membership() {
        assert!(is_safe(RobotState::default(), &one(1.0, 0.0)));
        assert!(!is_safe(RobotState::new(0.9, 0.0, 0.0), &one(1.0, 0.0)));
        assert!(is_safe(
            RobotState::new(123.0, -4.0, 0.0),
            &ObstacleSet::empty(0.5)
        ));
    }

    #[test]
    fn psi_examples() {
        let b = BarrierConfig::default();
        let x = RobotState::new(0.0, 0.3, 0.2);
        let obs =
            ObstacleSet::new(vec![Obstacle::new(1.0, 0.0), Obstacle::new(-1.0, 2.0)], 0.5).unwrap();
        let p = psi(x, VelocityCommand::ZERO, &obs, &b, &DCFG);
        let h = h_values(x, &obs);
        for (pi, hi) in p.iter().zip(&h) {
            assert_abs_diff_eq!(*pi, 0.1 * hi, epsilon = 1e-15);
        }

        // On the boundary, heading radially away from an obstacle at (1, 0).
        let on_boundary = RobotState::new(0.5, 0.0, PI);
        let away = psi(
            on_boundary,
            VelocityCommand::new(0.4, 0.0),
            &one(1.0, 0.0),
            &b,
            &DCFG,
        );
        assert_abs_diff_eq!(away[0], 0.04, epsilon = 1e-12);
        let toward = psi(
            on_boundary,
            VelocityCommand::new(-0.4, 0.0),
            &one(1.0, 0.0),
            &b,
            &DCFG,
        );
        assert!(toward[0] < 0.0);
    }

    #[test]
    fn gamma_must_be_in_unit_interval() {
        assert!(BarrierConfig::new(0.0).is_err());
        assert!(BarrierConfig::new(1.0).is_err());
        assert!(BarrierConfig::new(0.3).is_ok());
    }

    fn pose() -> impl Strategy<Value = RobotState> {
        (-3.0..3.0, -3.0..3.0, -PI..PI).prop_map(|(x, y, a)| RobotState::new(x, y, a))
    }

    proptest! {
        #[test]
        fn forward_invariance(start in pose(), seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let obs = ObstacleSet::new(vec![Obstacle::new(3.5, 0.0), Obstacle::new(-1.0, 4.0)], 0.5).unwrap();
            prop_assume!(is_safe(start, &obs));
            let b = BarrierConfig::default();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut x = start;
            for _ in 0..200 {
                let mut u = VelocityCommand::new(rng.random_range(-0.4..0.4), rng.random_range(-0.8..0.8));
                // Fall back to braking when the random input would break the CBF condition.
                if min_or_none(&psi(x, u, &obs, &b, &DCFG)).unwrap() < 0.0 {
                    u.v = 0.0;
                }
                let h = h_values(x, &obs);
                let p = psi(x, u, &obs, &b, &DCFG);
                prop_assert!(p.iter().all(|&v| v >= 0.0));
                x = step(x, u, &DCFG);
                let hn = h_values(x, &obs);
                for (a, b) in hn.iter().zip(&h) {
                    prop_assert!(*a >= 0.0);
                    prop_assert!(*a >= 0.9 * b - 1e-12);
                }
            }
        }

        #[test]
        fn psi_is_lipschitz(x in pose(), v in -0.4..0.4f64, w in -0.8..0.8f64, dv in -1e-6..1e-6f64, dw in -1e-6..1e-6f64) {
            let obs = ObstacleSet::new(vec![Obstacle::new(1.0, 0.2), Obstacle::new(-2.0, 1.0)], 0.5).unwrap();
            let b = BarrierConfig::default();
            let a = psi(x, VelocityCommand::new(v, w), &obs, &b, &DCFG);
            let c = psi(x, VelocityCommand::new(v + dv, w + dw), &obs, &b, &DCFG);
            for (p, q) in a.iter().zip(&c) {
                prop_assert!((p - q).abs() <= 1e-5);
            }
        }

        #[test]
        fn h_is_translation_invariant(x in pose(), dx in -50.0..50.0f64, dy in -50.0..50.0f64) {
            let obs = ObstacleSet::new(vec![Obstacle::new(1.0, 0.2), Obstacle::new(-2.0, 1.0)], 0.5).unwrap();
            let shifted = ObstacleSet::new(
                obs.centers.iter().map(|o| Obstacle::new(o.x + dx, o.y + dy)).collect(),
                0.5,
            ).unwrap();
            let a = h_values(x, &obs);
            let b = h_values(RobotState::new(x.px + dx, x.py + dy, x.yaw), &shifted);
            for (p, q) in a.iter().zip(&b) {
                prop_assert!((p - q).abs() <= 1e-12);
            }
        }
    }
}
