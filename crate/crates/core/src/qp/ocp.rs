//! Interior-point solver for stage-structured QPs.
//!
//! ```text
//!     minimize   Σ_k ½ [x_k; w_k]ᵀ H_k [x_k; w_k] + q_kᵀ x_k + r_kᵀ w_k  +  ½ x_Nᵀ P x_N + p ᵀ x_N
//!     s.t.       x_{k+1} = A_k x_k + B_k w_k + c_k,   x_0 given
//!                g_x·x_k + g_w·w_k + offset ≥ 0       (per stage)
//!                w_k[j] = value                       (optional per component)
//! ```
//!
//! Every Newton system is solved by a Riccati recursion after the inequality
//! block has been condensed into the stage Hessians. The factorization is
//! shared by the predictor and corrector solves.

use nalgebra::{Cholesky, Const, SMatrix, SVector};

use super::{max_step, mehrotra_sigma, IpSettings};
use crate::error::{Error, Result};

/// One inequality row `gx·x + gw·w + offset ≥ 0`.
#[derive(Debug, Clone, Copy)]
pub struct StageConstraint<const NX: usize, const NW: usize> {
    pub gx: SVector<f64, NX>,
    pub gw: SVector<f64, NW>,
    pub offset: f64,
}

#[derive(Debug, Clone)]
pub struct Stage<const NX: usize, const NW: usize> {
    pub a: SMatrix<f64, NX, NX>,
    pub b: SMatrix<f64, NX, NW>,
    pub c: SVector<f64, NX>,
    pub hxx: SMatrix<f64, NX, NX>,
    pub hwx: SMatrix<f64, NW, NX>,
    pub hww: SMatrix<f64, NW, NW>,
    pub qx: SVector<f64, NX>,
    pub qw: SVector<f64, NW>,
    pub constraints: Vec<StageConstraint<NX, NW>>,
    pub fixed: [Option<f64>; NW],
}

impl<const NX: usize, const NW: usize> Stage<NX, NW> {
    /// Zero-cost stage with the given dynamics.
    pub fn new(a: SMatrix<f64, NX, NX>, b: SMatrix<f64, NX, NW>, c: SVector<f64, NX>) -> Self {
        Self {
            a,
            b,
            c,
            hxx: SMatrix::zeros(),
            hwx: SMatrix::zeros(),
            hww: SMatrix::zeros(),
            qx: SVector::zeros(),
            qw: SVector::zeros(),
            constraints: Vec::new(),
            fixed: [None; NW],
        }
    }
}

#[derive(Debug, Clone)]
pub struct OcpQp<const NX: usize, const NW: usize> {
    pub x0: SVector<f64, NX>,
    pub stages: Vec<Stage<NX, NW>>,
    pub terminal_hess: SMatrix<f64, NX, NX>,
    pub terminal_grad: SVector<f64, NX>,
}

impl<const NX: usize, const NW: usize> OcpQp<NX, NW> {
    pub fn objective(&self, xs: &[SVector<f64, NX>], ws: &[SVector<f64, NW>]) -> f64 {
        let mut total = 0.0;
        for (k, st) in self.stages.iter().enumerate() {
            let (x, w) = (&xs[k], &ws[k]);
            total += 0.5 * x.dot(&(st.hxx * x)) + w.dot(&(st.hwx * x)) + 0.5 * w.dot(&(st.hww * w));
            total += st.qx.dot(x) + st.qw.dot(w);
        }
        let xn = &xs[self.stages.len()];
        total + 0.5 * xn.dot(&(self.terminal_hess * xn)) + self.terminal_grad.dot(xn)
    }

    fn constraint_count(&self) -> usize {
        self.stages.iter().map(|s| s.constraints.len()).sum()
    }
}

#[derive(Debug, Clone)]
pub struct OcpSolution<const NX: usize, const NW: usize> {
    pub xs: Vec<SVector<f64, NX>>,
    pub ws: Vec<SVector<f64, NW>>,
    /// Inequality multipliers, stage by stage in declaration order.
    pub multipliers: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Largest scaled KKT residual at the returned point.
    pub residual: f64,
}

struct StageFactor<const NX: usize, const NW: usize> {
    b: SMatrix<f64, NX, NW>,
    sbar: SMatrix<f64, NW, NX>,
    chol: Cholesky<f64, Const<NW>>,
    k: SMatrix<f64, NW, NX>,
    p_next: SMatrix<f64, NX, NX>,
}

struct Direction<const NX: usize, const NW: usize> {
    dx: Vec<SVector<f64, NX>>,
    dw: Vec<SVector<f64, NW>>,
    ds: Vec<f64>,
    dy: Vec<f64>,
}

pub fn solve<const NX: usize, const NW: usize>(
    qp: &OcpQp<NX, NW>,
    settings: &IpSettings,
) -> Result<OcpSolution<NX, NW>> {
    let n = qp.stages.len();
    let m = qp.constraint_count();
    let mut starts = Vec::with_capacity(n + 1);
    let mut acc = 0;
    for st in &qp.stages {
        starts.push(acc);
        acc += st.constraints.len();
    }
    starts.push(acc);

    let mut ws: Vec<SVector<f64, NW>> = qp
        .stages
        .iter()
        .map(|st| SVector::from_fn(|j, _| st.fixed[j].unwrap_or(0.0)))
        .collect();
    let mut xs = Vec::with_capacity(n + 1);
    xs.push(qp.x0);
    for (k, st) in qp.stages.iter().enumerate() {
        let next = st.a * xs[k] + st.b * ws[k] + st.c;
        xs.push(next);
    }
    let mut s = vec![0.0; m];
    for (k, st) in qp.stages.iter().enumerate() {
        for (i, row) in st.constraints.iter().enumerate() {
            s[starts[k] + i] = row_value(row, &xs[k], &ws[k]).max(1.0);
        }
    }
    let mut y = vec![1.0; m];

    let scale_d = 1.0
        + qp.stages
            .iter()
            .map(|st| st.qx.amax().max(st.qw.amax()))
            .fold(qp.terminal_grad.amax(), f64::max);
    let scale_p = 1.0
        + qp.stages
            .iter()
            .map(|st| {
                st.c.amax().max(
                    st.constraints
                        .iter()
                        .map(|r| r.offset.abs())
                        .fold(0.0, f64::max),
                )
            })
            .fold(0.0, f64::max);

    let mut residual = f64::INFINITY;
    for iteration in 0..=settings.max_iterations {
        // Residuals at the current iterate.
        let mut r_p = vec![0.0; m];
        let mut grad_x = Vec::with_capacity(n + 1);
        let mut grad_w = Vec::with_capacity(n);
        let mut rdyn = Vec::with_capacity(n);
        for (k, st) in qp.stages.iter().enumerate() {
            let (x, w) = (&xs[k], &ws[k]);
            let mut gx = st.hxx * x + st.hwx.transpose() * w + st.qx;
            let mut gw = st.hwx * x + st.hww * w + st.qw;
            for (i, row) in st.constraints.iter().enumerate() {
                let idx = starts[k] + i;
                r_p[idx] = row_value(row, x, w) - s[idx];
                gx -= y[idx] * row.gx;
                gw -= y[idx] * row.gw;
            }
            grad_x.push(gx);
            grad_w.push(mask(gw, &st.fixed));
            rdyn.push(st.a * x + st.b * w + st.c - xs[k + 1]);
        }
        grad_x.push(qp.terminal_hess * xs[n] + qp.terminal_grad);

        // Costates give the reduced dual residual.
        let mut pi = -grad_x[n];
        let mut dual = 0.0_f64;
        for k in (0..n).rev() {
            let st = &qp.stages[k];
            let rw = mask(grad_w[k] - st.b.transpose() * pi, &st.fixed);
            dual = dual.max(rw.amax());
            pi = st.a.transpose() * pi - grad_x[k];
        }
        let primal = rdyn
            .iter()
            .map(|r| r.amax())
            .chain(r_p.iter().map(|v| v.abs()))
            .fold(0.0, f64::max);
        let mu = if m > 0 {
            s.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / m as f64
        } else {
            0.0
        };
        residual = (dual / scale_d).max(primal / scale_p).max(mu);
        if dual <= settings.tolerance * scale_d
            && primal <= settings.tolerance * scale_p
            && mu <= settings.tolerance
        {
            return Ok(OcpSolution {
                xs,
                ws,
                multipliers: y,
                iterations: iteration,
                converged: true,
                residual,
            });
        }
        if iteration == settings.max_iterations {
            break;
        }

        let d: Vec<f64> = y.iter().zip(&s).map(|(yi, si)| yi / si).collect();
        let factors = factor(qp, &starts, &d)?;

        let direction = |r_c: &[f64]| -> Direction<NX, NW> {
            // Condensed linear terms: ∇L + Cᵀ(S⁻¹ r_c + D r_p).
            let mut lx = grad_x.clone();
            let mut lw = grad_w.clone();
            for (k, st) in qp.stages.iter().enumerate() {
                for (i, row) in st.constraints.iter().enumerate() {
                    let idx = starts[k] + i;
                    let coef = r_c[idx] / s[idx] + d[idx] * r_p[idx];
                    lx[k] += coef * row.gx;
                    lw[k] += coef * row.gw;
                }
                lw[k] = mask(lw[k], &st.fixed);
            }
            let (dx, dw) = riccati_solve(qp, &factors, &lx, &lw, &rdyn);
            let mut ds = vec![0.0; m];
            let mut dy = vec![0.0; m];
            for (k, st) in qp.stages.iter().enumerate() {
                for (i, row) in st.constraints.iter().enumerate() {
                    let idx = starts[k] + i;
                    ds[idx] = row.gx.dot(&dx[k]) + row.gw.dot(&dw[k]) + r_p[idx];
                    dy[idx] = -(r_c[idx] + y[idx] * ds[idx]) / s[idx];
                }
            }
            Direction { dx, dw, ds, dy }
        };

        let r_c_aff: Vec<f64> = s.iter().zip(&y).map(|(a, b)| a * b).collect();
        let aff = direction(&r_c_aff);
        let alpha_aff = max_step(&s, &aff.ds).min(max_step(&y, &aff.dy)).min(1.0);
        let mu_aff = if m > 0 {
            (0..m)
                .map(|i| (s[i] + alpha_aff * aff.ds[i]) * (y[i] + alpha_aff * aff.dy[i]))
                .sum::<f64>()
                / m as f64
        } else {
            0.0
        };
        let sigma = mehrotra_sigma(mu, mu_aff);
        let r_c: Vec<f64> = (0..m)
            .map(|i| s[i] * y[i] + aff.ds[i] * aff.dy[i] - sigma * mu)
            .collect();
        let dir = direction(&r_c);
        let alpha = (0.99 * max_step(&s, &dir.ds).min(max_step(&y, &dir.dy))).min(1.0);

        for k in 0..=n {
            xs[k] += alpha * dir.dx[k];
        }
        for k in 0..n {
            ws[k] += alpha * dir.dw[k];
        }
        for i in 0..m {
            s[i] += alpha * dir.ds[i];
            y[i] += alpha * dir.dy[i];
        }
        if !xs.iter().all(|x| x.iter().all(|v| v.is_finite())) {
            return Err(Error::SolverFailure("non-finite QP iterate".into()));
        }
    }
    Ok(OcpSolution {
        xs,
        ws,
        multipliers: y,
        iterations: settings.max_iterations,
        converged: false,
        residual,
    })
}

fn row_value<const NX: usize, const NW: usize>(
    row: &StageConstraint<NX, NW>,
    x: &SVector<f64, NX>,
    w: &SVector<f64, NW>,
) -> f64 {
    row.gx.dot(x) + row.gw.dot(w) + row.offset
}

fn mask<const NW: usize>(mut v: SVector<f64, NW>, fixed: &[Option<f64>; NW]) -> SVector<f64, NW> {
    for (j, f) in fixed.iter().enumerate() {
        if f.is_some() {
            v[j] = 0.0;
        }
    }
    v
}

fn factor<const NX: usize, const NW: usize>(
    qp: &OcpQp<NX, NW>,
    starts: &[usize],
    d: &[f64],
) -> Result<Vec<StageFactor<NX, NW>>> {
    let n = qp.stages.len();
    let mut p = qp.terminal_hess;
    let mut out: Vec<Option<StageFactor<NX, NW>>> = (0..n).map(|_| None).collect();
    for k in (0..n).rev() {
        let st = &qp.stages[k];
        let mut q = st.hxx;
        let mut sm = st.hwx;
        let mut r = st.hww;
        for (i, row) in st.constraints.iter().enumerate() {
            let di = d[starts[k] + i];
            q += di * row.gx * row.gx.transpose();
            sm += di * row.gw * row.gx.transpose();
            r += di * row.gw * row.gw.transpose();
        }
        let mut b = st.b;
        for (j, f) in st.fixed.iter().enumerate() {
            if f.is_some() {
                b.column_mut(j).fill(0.0);
                sm.row_mut(j).fill(0.0);
                r.row_mut(j).fill(0.0);
                r.column_mut(j).fill(0.0);
                r[(j, j)] = 1.0;
            }
        }
        let pb = p * b;
        let rbar = r + b.transpose() * pb;
        let sbar = sm + pb.transpose() * st.a;
        let chol = Cholesky::new(rbar).ok_or_else(|| {
            Error::SolverFailure(format!(
                "stage {k} reduced Hessian is not positive definite"
            ))
        })?;
        let k_gain = -chol.solve(&sbar);
        let p_next = p;
        p = q + st.a.transpose() * p * st.a + sbar.transpose() * k_gain;
        p = 0.5 * (p + p.transpose());
        out[k] = Some(StageFactor {
            b,
            sbar,
            chol,
            k: k_gain,
            p_next,
        });
    }
    Ok(out
        .into_iter()
        .map(|f| f.expect("every stage factored"))
        .collect())
}

fn riccati_solve<const NX: usize, const NW: usize>(
    qp: &OcpQp<NX, NW>,
    factors: &[StageFactor<NX, NW>],
    lx: &[SVector<f64, NX>],
    lw: &[SVector<f64, NW>],
    rdyn: &[SVector<f64, NX>],
) -> (Vec<SVector<f64, NX>>, Vec<SVector<f64, NW>>) {
    let n = qp.stages.len();
    let mut p = lx[n];
    let mut kff = vec![SVector::<f64, NW>::zeros(); n];
    for k in (0..n).rev() {
        let f = &factors[k];
        let v = f.p_next * rdyn[k] + p;
        let rbar = lw[k] + f.b.transpose() * v;
        kff[k] = -f.chol.solve(&rbar);
        p = lx[k] + qp.stages[k].a.transpose() * v + f.sbar.transpose() * kff[k];
    }
    let mut dx = Vec::with_capacity(n + 1);
    let mut dw = Vec::with_capacity(n);
    dx.push(SVector::<f64, NX>::zeros());
    for k in 0..n {
        let f = &factors[k];
        let w = f.k * dx[k] + kff[k];
        let next = qp.stages[k].a * dx[k] + f.b * w + rdyn[k];
        dw.push(w);
        dx.push(next);
    }
    (dx, dw)
}
