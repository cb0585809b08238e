//! Convex QP solvers.
//!
//! [`dense`] solves small general QPs through a dense KKT system. [`ocp`] solves
//! the stage-structured subproblems produced by the NMPC with a Riccati
//! recursion inside each interior-point iteration, so the cost grows linearly in
//! the horizon length.

pub mod dense;
pub mod ocp;

/// Settings shared by both interior-point solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IpSettings {
    /// Scaled tolerance on the KKT residuals and complementarity.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for IpSettings {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 60,
        }
    }
}

/// Largest step keeping `v + α dv ≥ 0` component-wise (infinite if nothing blocks).
pub(crate) fn max_step(v: &[f64], dv: &[f64]) -> f64 {
    v.iter().zip(dv).fold(f64::INFINITY, |acc, (&vi, &di)| {
        if di < 0.0 {
            acc.min(-vi / di)
        } else {
            acc
        }
    })
}

/// Centering parameter from the affine-scaling predictor.
pub(crate) fn mehrotra_sigma(mu: f64, mu_aff: f64) -> f64 {
    if mu <= 0.0 {
        return 0.0;
    }
    (mu_aff / mu).clamp(0.0, 1.0).powi(3)
}
