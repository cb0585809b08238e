//! Shared-autonomy navigation for a planar unicycle.
//!
//! Live operator commands are blended with a CBF-constrained nonlinear MPC. The
//! MPC predicts the operator through a noisily-rational value model whose
//! weights are adapted online by projected gradient descent.

pub mod adaptation;
pub mod arbitration;
pub mod dynamics;
pub mod error;
pub mod human_model;
pub mod nmpc;
pub mod qp;
pub mod safety;
pub mod simulation;

pub use error::{Error, Result};
