//! Dense primal-dual interior-point method (Mehrotra predictor-corrector).
//!
//! ```text
//!     minimize     ½ xᵀ H x + gᵀ x
//!     subject to   A_eq x  = b_eq
//!                  A_in x ≥ b_in
//! ```

use nalgebra::{DMatrix, DVector};

use super::{max_step, mehrotra_sigma, IpSettings};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct DenseQp {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub eq_matrix: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
    pub ineq_matrix: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
}

impl DenseQp {
    /// Unconstrained problem of dimension `n`; add rows with the `with_*` builders.
    pub fn new(hessian: DMatrix<f64>, gradient: DVector<f64>) -> Self {
        let n = gradient.len();
        Self {
            hessian,
            gradient,
            eq_matrix: DMatrix::zeros(0, n),
            eq_rhs: DVector::zeros(0),
            ineq_matrix: DMatrix::zeros(0, n),
            ineq_rhs: DVector::zeros(0),
        }
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.eq_matrix = a;
        self.eq_rhs = b;
        self
    }

    pub fn with_inequalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.ineq_matrix = a;
        self.ineq_rhs = b;
        self
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.gradient.dot(x)
    }

    fn check_dims(&self) -> Result<()> {
        let n = self.gradient.len();
        let ok = self.hessian.shape() == (n, n)
            && self.eq_matrix.ncols() == n
            && self.eq_matrix.nrows() == self.eq_rhs.len()
            && self.ineq_matrix.ncols() == n
            && self.ineq_matrix.nrows() == self.ineq_rhs.len();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig("inconsistent QP dimensions".into()))
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenseSolution {
    pub x: DVector<f64>,
    pub eq_multipliers: DVector<f64>,
    pub ineq_multipliers: DVector<f64>,
    pub iterations: usize,
}

pub fn solve(qp: &DenseQp, settings: &IpSettings) -> Result<DenseSolution> {
    qp.check_dims()?;
    let n = qp.gradient.len();
    let p = qp.eq_rhs.len();
    let m = qp.ineq_rhs.len();
    let (h, g) = (&qp.hessian, &qp.gradient);
    let (ae, be) = (&qp.eq_matrix, &qp.eq_rhs);
    let (ai, bi) = (&qp.ineq_matrix, &qp.ineq_rhs);

    let mut x = DVector::zeros(n);
    let mut nu = DVector::zeros(p);
    let mut s = (ai * &x - bi).map(|v| v.max(1.0));
    let mut y = DVector::from_element(m, 1.0);

    let scale_d = 1.0 + g.amax();
    let scale_p = 1.0 + be.amax().max(bi.amax());

    for iteration in 0..settings.max_iterations {
        let r_d = h * &x + g - ae.transpose() * &nu - ai.transpose() * &y;
        let r_e = ae * &x - be;
        let r_i = ai * &x - &s - bi;
        let mu = if m > 0 { s.dot(&y) / m as f64 } else { 0.0 };
        if r_d.amax() <= settings.tolerance * scale_d
            && r_e.amax().max(r_i.amax()) <= settings.tolerance * scale_p
            && mu <= settings.tolerance
        {
            return Ok(DenseSolution {
                x,
                eq_multipliers: nu,
                ineq_multipliers: y,
                iterations: iteration,
            });
        }

        let d = DVector::from_iterator(m, y.iter().zip(s.iter()).map(|(yi, si)| yi / si));
        let mut kkt = DMatrix::zeros(n + p, n + p);
        let scaled = DMatrix::from_fn(m, n, |r, c| ai[(r, c)] * d[r]);
        kkt.view_mut((0, 0), (n, n))
            .copy_from(&(h + ai.transpose() * scaled));
        kkt.view_mut((0, n), (n, p)).copy_from(&(-ae.transpose()));
        kkt.view_mut((n, 0), (p, n)).copy_from(ae);
        let lu = kkt.lu();

        let newton = |r_c: &DVector<f64>| -> Option<(DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>)> {
            let w = DVector::from_iterator(
                m,
                (0..m).map(|i| (r_c[i] + y[i] * r_i[i]) / s[i]),
            );
            let mut rhs = DVector::zeros(n + p);
            rhs.rows_mut(0, n).copy_from(&(-&r_d - ai.transpose() * &w));
            rhs.rows_mut(n, p).copy_from(&(-&r_e));
            let sol = lu.solve(&rhs)?;
            let dx = sol.rows(0, n).into_owned();
            let dnu = sol.rows(n, p).into_owned();
            let ds = ai * &dx + &r_i;
            let dy = DVector::from_iterator(m, (0..m).map(|i| -(r_c[i] + y[i] * ds[i]) / s[i]));
            Some((dx, dnu, ds, dy))
        };

        let r_c_aff = s.component_mul(&y);
        let (_, _, ds_a, dy_a) =
            newton(&r_c_aff).ok_or_else(|| Error::SolverFailure("singular KKT matrix".into()))?;
        let alpha_aff = max_step(s.as_slice(), ds_a.as_slice())
            .min(max_step(y.as_slice(), dy_a.as_slice()))
            .min(1.0);
        let mu_aff = if m > 0 {
            (&s + alpha_aff * &ds_a).dot(&(&y + alpha_aff * &dy_a)) / m as f64
        } else {
            0.0
        };
        let sigma = mehrotra_sigma(mu, mu_aff);
        let r_c = DVector::from_iterator(
            m,
            (0..m).map(|i| s[i] * y[i] + ds_a[i] * dy_a[i] - sigma * mu),
        );
        let (dx, dnu, ds, dy) =
            newton(&r_c).ok_or_else(|| Error::SolverFailure("singular KKT matrix".into()))?;
        let alpha = (0.99
            * max_step(s.as_slice(), ds.as_slice()).min(max_step(y.as_slice(), dy.as_slice())))
        .min(1.0);
        x += alpha * dx;
        nu += alpha * dnu;
        s += alpha * ds;
        y += alpha * dy;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::SolverFailure("non-finite iterate".into()));
        }
    }
    Err(Error::Convergence {
        iterations: settings.max_iterations,
        residual: (h * &x + g - ae.transpose() * &nu - ai.transpose() * &y).amax(),
    })
}
