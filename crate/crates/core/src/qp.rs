//! Dense convex quadratic-program solver.
//!
//! Operator-splitting (ADMM) method with Ruiz equilibration, adaptive
//! penalty, and an active-set polish step, in the style of OSQP. Solves
//!
//! ```text
//!     minimize    1/2 z' P z + c' z
//!     subject to  A_eq z  = b_eq
//!                 G z    <= h
//! ```
//!
//! with `P` symmetric positive semidefinite.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Dense convex QP instance.
#[derive(Debug, Clone)]
pub struct QuadraticProgram {
    pub p: DMatrix<f64>,
    pub c: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub g: DMatrix<f64>,
    pub h: DVector<f64>,
}

impl QuadraticProgram {
    /// Instance without constraints; matrices get zero rows.
    pub fn unconstrained(p: DMatrix<f64>, c: DVector<f64>) -> Self {
        let n = c.len();
        Self {
            p,
            c,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            g: DMatrix::zeros(0, n),
            h: DVector::zeros(0),
        }
    }

    pub fn num_vars(&self) -> usize {
        self.c.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_vars();
        if self.p.nrows() != n || self.p.ncols() != n {
            return Err(Error::dim("P shape", n * n, self.p.nrows() * self.p.ncols()));
        }
        if (&self.p - self.p.transpose()).amax() > 1e-10 * (1.0 + self.p.amax()) {
            return Err(Error::InvalidParameter("P must be symmetric".into()));
        }
        if self.a_eq.ncols() != n || self.a_eq.nrows() != self.b_eq.len() {
            return Err(Error::dim("equality block", self.b_eq.len() * n, self.a_eq.nrows() * self.a_eq.ncols()));
        }
        if self.g.ncols() != n || self.g.nrows() != self.h.len() {
            return Err(Error::dim("inequality block", self.h.len() * n, self.g.nrows() * self.g.ncols()));
        }
        Ok(())
    }

    /// Objective `1/2 z' P z + c' z` at a point.
    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * (z.transpose() * &self.p * z)[(0, 0)] + self.c.dot(z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIterations,
    Infeasible,
}

impl QpStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            QpStatus::Optimal => "optimal",
            QpStatus::MaxIterations => "max-iterations",
            QpStatus::Infeasible => "infeasible",
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    /// Constraint multipliers ordered `[equalities, inequalities]`;
    /// inequality multipliers are non-negative at an optimum.
    pub duals: DVector<f64>,
}

/// Primal/dual iterates carried between receding-horizon solves.
#[derive(Debug, Clone)]
pub struct QpWarmStart {
    pub z: DVector<f64>,
    pub duals: DVector<f64>,
}

impl From<&QpSolution> for QpWarmStart {
    fn from(sol: &QpSolution) -> Self {
        Self { z: sol.z.clone(), duals: sol.duals.clone() }
    }
}

#[derive(Debug, Clone)]
pub struct QpSettings {
    pub tol: f64,
    pub max_iter: usize,
    /// Proximal regularization on the primal iterate.
    pub sigma: f64,
    /// Over-relaxation factor.
    pub alpha: f64,
    /// Initial penalty.
    pub rho: f64,
    /// Ruiz equilibration sweeps (0 disables scaling).
    pub scaling_iters: usize,
    pub polish: bool,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 20_000,
            sigma: 1e-6,
            alpha: 1.6,
            rho: 0.1,
            scaling_iters: 10,
            polish: true,
        }
    }
}

impl QpSettings {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, ..Self::default() }
    }
}

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_BOOST: f64 = 1e3;
const EPS_INFEAS: f64 = 1e-9;

/// Internal two-sided form `l <= A z <= u` combining equalities and
/// inequalities, after diagonal equilibration.
struct Prepared {
    p: DMatrix<f64>,
    c: DVector<f64>,
    a: DMatrix<f64>,
    l: DVector<f64>,
    u: DVector<f64>,
    /// Variable scaling: z_true = d .* z_scaled.
    d: DVector<f64>,
    /// Constraint scaling: rows of the true A were multiplied by e.
    e: DVector<f64>,
    /// Cost scaling: scaled objective = gamma * true objective.
    gamma: f64,
    n_eq: usize,
}

fn prepare(qp: &QuadraticProgram, scaling_iters: usize) -> Prepared {
    let n = qp.num_vars();
    let n_eq = qp.a_eq.nrows();
    let m_rows = n_eq + qp.g.nrows();

    let mut a = DMatrix::zeros(m_rows, n);
    a.rows_mut(0, n_eq).copy_from(&qp.a_eq);
    a.rows_mut(n_eq, qp.g.nrows()).copy_from(&qp.g);
    let mut l = DVector::from_element(m_rows, f64::NEG_INFINITY);
    let mut u = DVector::zeros(m_rows);
    l.rows_mut(0, n_eq).copy_from(&qp.b_eq);
    u.rows_mut(0, n_eq).copy_from(&qp.b_eq);
    u.rows_mut(n_eq, qp.g.nrows()).copy_from(&qp.h);

    let mut p = qp.p.clone();
    let mut c = qp.c.clone();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m_rows, 1.0);
    let mut gamma = 1.0;

    // Modified Ruiz equilibration on [[P, A'], [A, 0]].
    for _ in 0..scaling_iters {
        let mut dd = DVector::from_element(n, 0.0f64);
        for j in 0..n {
            let col_p = p.column(j).amax();
            let col_a = if m_rows > 0 { a.column(j).amax() } else { 0.0 };
            dd[j] = col_p.max(col_a);
        }
        let mut ee = DVector::from_element(m_rows, 0.0f64);
        for i in 0..m_rows {
            ee[i] = a.row(i).amax();
        }
        let norm_to_scale = |v: f64| if v > 1e-12 { 1.0 / v.sqrt() } else { 1.0 };
        let dd = dd.map(norm_to_scale);
        let ee = ee.map(norm_to_scale);

        for i in 0..n {
            for j in 0..n {
                p[(i, j)] *= dd[i] * dd[j];
            }
        }
        for i in 0..m_rows {
            for j in 0..n {
                a[(i, j)] *= ee[i] * dd[j];
            }
        }
        for j in 0..n {
            c[j] *= dd[j];
            d[j] *= dd[j];
        }
        for i in 0..m_rows {
            l[i] *= ee[i];
            u[i] *= ee[i];
            e[i] *= ee[i];
        }

        // Cost normalization.
        let mean_col = if n > 0 {
            (0..n).map(|j| p.column(j).amax()).sum::<f64>() / n as f64
        } else {
            0.0
        };
        let denom = mean_col.max(c.amax());
        if denom > 1e-12 {
            let g_step = 1.0 / denom;
            p *= g_step;
            c *= g_step;
            gamma *= g_step;
        }
    }

    Prepared { p, c, a, l, u, d, e, gamma, n_eq }
}

struct KktFactor {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

fn factor_kkt(p: &DMatrix<f64>, a: &DMatrix<f64>, sigma: f64, rho: &DVector<f64>) -> KktFactor {
    let n = p.nrows();
    let m = a.nrows();
    let mut kkt = DMatrix::zeros(n + m, n + m);
    kkt.view_mut((0, 0), (n, n)).copy_from(p);
    for i in 0..n {
        kkt[(i, i)] += sigma;
    }
    kkt.view_mut((0, n), (n, m)).copy_from(&a.transpose());
    kkt.view_mut((n, 0), (m, n)).copy_from(a);
    for i in 0..m {
        kkt[(n + i, n + i)] = -1.0 / rho[i];
    }
    KktFactor { lu: kkt.lu() }
}

fn clamp_to(l: &DVector<f64>, u: &DVector<f64>, v: &mut DVector<f64>) {
    for i in 0..v.len() {
        v[i] = v[i].max(l[i]).min(u[i]);
    }
}

/// Solve a QP, optionally warm-started from a previous solution.
pub fn solve_qp(
    qp: &QuadraticProgram,
    settings: &QpSettings,
    warm: Option<&QpWarmStart>,
) -> Result<QpSolution> {
    qp.validate()?;
    let n = qp.num_vars();
    let prep = prepare(qp, settings.scaling_iters);
    let m_rows = prep.a.nrows();

    let mut rho = DVector::from_element(m_rows, settings.rho);
    for i in 0..prep.n_eq {
        rho[i] = (settings.rho * RHO_EQ_BOOST).clamp(RHO_MIN, RHO_MAX);
    }
    let mut factor = factor_kkt(&prep.p, &prep.a, settings.sigma, &rho);

    // Scaled iterates.
    let mut x = match warm {
        Some(w) if w.z.len() == n => DVector::from_fn(n, |i, _| w.z[i] / prep.d[i]),
        _ => DVector::zeros(n),
    };
    let mut y = match warm {
        Some(w) if w.duals.len() == m_rows => {
            DVector::from_fn(m_rows, |i, _| w.duals[i] * prep.gamma / prep.e[i])
        }
        _ => DVector::zeros(m_rows),
    };
    let mut zc = &prep.a * &x;
    clamp_to(&prep.l, &prep.u, &mut zc);

    let mut status = QpStatus::MaxIterations;
    let mut iterations = settings.max_iter;

    for k in 0..settings.max_iter {
        // Termination on the unscaled problem, checked before stepping so a
        // warm start at the optimum returns unchanged.
        if k % 10 == 0 {
            let (rp, rd) = unscaled_residuals(qp, &prep, &x, &y);
            let tol_p = termination_tol(settings.tol, qp, &prep, &x, true);
            let tol_d = termination_tol(settings.tol, qp, &prep, &x, false)
                .max(settings.tol * (1.0 + qp.c.amax()));
            if rp <= tol_p && rd <= tol_d {
                status = QpStatus::Optimal;
                iterations = k;
                break;
            }
        }

        // KKT solve.
        let mut rhs = DVector::zeros(n + m_rows);
        for i in 0..n {
            rhs[i] = settings.sigma * x[i] - prep.c[i];
        }
        for i in 0..m_rows {
            rhs[n + i] = zc[i] - y[i] / rho[i];
        }
        let sol = factor.lu.solve(&rhs).unwrap_or_else(|| DVector::zeros(n + m_rows));
        let x_tilde = sol.rows(0, n).into_owned();
        let nu = sol.rows(n, m_rows).into_owned();
        let mut z_tilde = zc.clone();
        for i in 0..m_rows {
            z_tilde[i] += (nu[i] - y[i]) / rho[i];
        }

        let x_next = settings.alpha * &x_tilde + (1.0 - settings.alpha) * &x;
        let mut z_relax = settings.alpha * &z_tilde + (1.0 - settings.alpha) * &zc;
        let mut z_next = &z_relax + DVector::from_fn(m_rows, |i, _| y[i] / rho[i]);
        clamp_to(&prep.l, &prep.u, &mut z_next);
        z_relax -= &z_next;
        let y_prev = y.clone();
        for i in 0..m_rows {
            y[i] += rho[i] * z_relax[i];
        }

        // Primal infeasibility certificate from the dual update direction.
        let dy = &y - &y_prev;
        let dy_norm = dy.amax();
        if k % 25 == 24 && dy_norm > EPS_INFEAS {
            let at_dy = prep.a.transpose() * &dy;
            let mut support = 0.0;
            let mut bounded = true;
            for i in 0..m_rows {
                if dy[i] > 0.0 {
                    if prep.u[i].is_infinite() {
                        bounded = false;
                        break;
                    }
                    support += prep.u[i] * dy[i];
                } else if dy[i] < 0.0 {
                    if prep.l[i].is_infinite() {
                        bounded = false;
                        break;
                    }
                    support += prep.l[i] * dy[i];
                }
            }
            if bounded
                && at_dy.amax() <= EPS_INFEAS.sqrt() * dy_norm
                && support < -EPS_INFEAS.sqrt() * dy_norm
            {
                status = QpStatus::Infeasible;
                iterations = k + 1;
                break;
            }
        }

        x = x_next;
        zc = z_next;

        // Adaptive penalty.
        if m_rows > 0 && k % 50 == 49 {
            let ax = &prep.a * &x;
            let rp = (&ax - &zc).amax() / (ax.amax().max(zc.amax()).max(1.0));
            let grad = &prep.p * &x + &prep.c + prep.a.transpose() * &y;
            let rd = grad.amax()
                / ((&prep.p * &x).amax().max((prep.a.transpose() * &y).amax()).max(prep.c.amax()).max(1.0));
            if rd > 1e-30 {
                let ratio = (rp / rd).sqrt();
                if ratio > 5.0 || ratio < 0.2 {
                    for i in 0..m_rows {
                        rho[i] = (rho[i] * ratio).clamp(RHO_MIN, RHO_MAX);
                    }
                    factor = factor_kkt(&prep.p, &prep.a, settings.sigma, &rho);
                }
            }
        }
    }

    // Unscale.
    let mut z_out = DVector::from_fn(n, |i, _| x[i] * prep.d[i]);
    let mut duals = DVector::from_fn(m_rows, |i, _| y[i] * prep.e[i] / prep.gamma);

    if settings.polish && status == QpStatus::Optimal {
        if let Some((pz, pd)) = polish(qp, prep.n_eq, &z_out, &duals) {
            let (rp0, rd0) = residuals_unscaled_direct(qp, &z_out, &duals);
            let (rp1, rd1) = residuals_unscaled_direct(qp, &pz, &pd);
            if rp1.max(rd1) <= rp0.max(rd0) {
                z_out = pz;
                duals = pd;
            }
        }
    }

    let (rp, rd) = residuals_unscaled_direct(qp, &z_out, &duals);
    Ok(QpSolution {
        objective: qp.objective(&z_out),
        z: z_out,
        status,
        primal_residual: rp,
        dual_residual: rd,
        iterations,
        duals,
    })
}

fn termination_tol(
    tol: f64,
    qp: &QuadraticProgram,
    prep: &Prepared,
    x: &DVector<f64>,
    primal: bool,
) -> f64 {
    // eps_abs + eps_rel * scale, on the unscaled problem.
    let z_true = DVector::from_fn(x.len(), |i, _| x[i] * prep.d[i]);
    if primal {
        let axe = &qp.a_eq * &z_true;
        let gxe = &qp.g * &z_true;
        let scale = axe.amax().max(gxe.amax()).max(qp.b_eq.amax());
        tol + tol * scale
    } else {
        let px = (&qp.p * &z_true).amax();
        tol + tol * px
    }
}

/// Residuals of the original problem at an unscaled point.
fn residuals_unscaled_direct(qp: &QuadraticProgram, z: &DVector<f64>, duals: &DVector<f64>) -> (f64, f64) {
    let n_eq = qp.a_eq.nrows();
    let mut rp: f64 = 0.0;
    if n_eq > 0 {
        rp = (&qp.a_eq * z - &qp.b_eq).amax();
    }
    if qp.g.nrows() > 0 {
        let slack = &qp.g * z - &qp.h;
        for s in slack.iter() {
            rp = rp.max(s.max(0.0));
        }
    }
    let mut grad = &qp.p * z + &qp.c;
    if n_eq > 0 {
        grad += qp.a_eq.transpose() * duals.rows(0, n_eq);
    }
    if qp.g.nrows() > 0 {
        grad += qp.g.transpose() * duals.rows(n_eq, qp.g.nrows());
    }
    (rp, grad.amax())
}

fn unscaled_residuals(
    qp: &QuadraticProgram,
    prep: &Prepared,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> (f64, f64) {
    let n = x.len();
    let m_rows = y.len();
    let z = DVector::from_fn(n, |i, _| x[i] * prep.d[i]);
    let duals = DVector::from_fn(m_rows, |i, _| y[i] * prep.e[i] / prep.gamma);
    residuals_unscaled_direct(qp, &z, &duals)
}

/// Solve the equality-constrained KKT system on the identified active set.
fn polish(
    qp: &QuadraticProgram,
    n_eq: usize,
    z: &DVector<f64>,
    duals: &DVector<f64>,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = qp.num_vars();
    let m_ineq = qp.g.nrows();
    let slack = if m_ineq > 0 { &qp.g * z - &qp.h } else { DVector::zeros(0) };
    let act_tol = 1e-7 * (1.0 + qp.h.amax());
    let active: Vec<usize> = (0..m_ineq)
        .filter(|&i| duals[n_eq + i] > 1e-9 || slack[i] > -act_tol)
        .collect();

    let rows = n_eq + active.len();
    let mut a_act = DMatrix::zeros(rows, n);
    let mut b_act = DVector::zeros(rows);
    a_act.rows_mut(0, n_eq).copy_from(&qp.a_eq);
    b_act.rows_mut(0, n_eq).copy_from(&qp.b_eq);
    for (k, &i) in active.iter().enumerate() {
        a_act.row_mut(n_eq + k).copy_from(&qp.g.row(i));
        b_act[n_eq + k] = qp.h[i];
    }

    // Regularized KKT with one round of iterative refinement.
    let delta = 1e-9;
    let dim = n + rows;
    let mut kkt = DMatrix::zeros(dim, dim);
    kkt.view_mut((0, 0), (n, n)).copy_from(&qp.p);
    for i in 0..n {
        kkt[(i, i)] += delta;
    }
    kkt.view_mut((0, n), (n, rows)).copy_from(&a_act.transpose());
    kkt.view_mut((n, 0), (rows, n)).copy_from(&a_act);
    for i in 0..rows {
        kkt[(n + i, n + i)] = -delta;
    }
    let lu = kkt.clone().lu();
    let mut rhs = DVector::zeros(dim);
    for i in 0..n {
        rhs[i] = -qp.c[i];
    }
    rhs.rows_mut(n, rows).copy_from(&b_act);
    let mut sol = lu.solve(&rhs)?;
    // Refinement against the unregularized system.
    let mut kkt0 = kkt;
    for i in 0..n {
        kkt0[(i, i)] -= delta;
    }
    for i in 0..rows {
        kkt0[(n + i, n + i)] += delta;
    }
    for _ in 0..2 {
        let resid = &rhs - &kkt0 * &sol;
        if resid.amax() < 1e-14 {
            break;
        }
        if let Some(corr) = lu.solve(&resid) {
            sol += corr;
        } else {
            break;
        }
    }

    let z_pol = sol.rows(0, n).into_owned();
    let mut duals_pol = DVector::zeros(n_eq + m_ineq);
    for i in 0..n_eq {
        duals_pol[i] = sol[n + i];
    }
    for (k, &i) in active.iter().enumerate() {
        // Clamp tiny negative multipliers arising from mis-identified rows.
        duals_pol[n_eq + i] = sol[n + n_eq + k].max(0.0);
    }
    Some((z_pol, duals_pol))
}
