//! Strictly convex dense QPs `min uᵀWu + qᵀu s.t. Cu ⪯ h`.
//!
//! Uses the Goldfarb–Idnani dual active-set method: start at the
//! unconstrained minimizer and repeatedly add the most violated constraint,
//! dropping active ones whose multiplier would turn negative. Every iterate
//! is dual feasible, so the final multipliers certify optimality directly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CondensedProblem;
use crate::polytope::Polytope;

/// Solver tolerances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QpSettings {
    pub kkt_tol: f64,
    pub feas_tol: f64,
    pub max_iter: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self { kkt_tol: 1e-8, feas_tol: 1e-9, max_iter: 100_000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub u: DVector<f64>,
    /// One multiplier per constraint row, zero off the active set.
    pub multipliers: DVector<f64>,
    /// `uᵀWu + qᵀu` at the optimum.
    pub value: f64,
    pub iterations: usize,
}

/// KKT residuals of a candidate primal-dual pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport {
    pub stationarity: f64,
    pub primal_violation: f64,
    pub dual_violation: f64,
    pub complementarity: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_violation)
            .max(self.dual_violation)
            .max(self.complementarity)
    }
}

pub fn kkt_residuals(
    w: &DMatrix<f64>,
    q: &DVector<f64>,
    c: &DMatrix<f64>,
    h: &DVector<f64>,
    u: &DVector<f64>,
    mult: &DVector<f64>,
) -> KktReport {
    let grad = w * u * 2.0 + q + c.transpose() * mult;
    let slack = c * u - h;
    KktReport {
        stationarity: grad.amax(),
        primal_violation: slack.iter().fold(0.0, |a, &s| a.max(s)),
        dual_violation: mult.iter().fold(0.0, |a, &m| a.max(-m)),
        complementarity: slack.iter().zip(mult.iter()).fold(0.0, |a, (s, m)| a.max((s * m).abs())),
    }
}

/// Minimizes `uᵀWu + qᵀu` subject to `Cu ⪯ h`.
pub fn solve_qp(
    w: &DMatrix<f64>,
    q: &DVector<f64>,
    c: &DMatrix<f64>,
    h: &DVector<f64>,
    settings: &QpSettings,
) -> Result<QpSolution> {
    let n = w.nrows();
    let rows = c.nrows();
    if w.shape() != (n, n) || q.len() != n || c.ncols() != n || h.len() != rows {
        return Err(Error::Dimension(format!(
            "qp: W {:?}, q {}, C {:?}, h {}",
            w.shape(),
            q.len(),
            c.shape(),
            h.len()
        )));
    }
    let g = w * 2.0;
    let ginv = g
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { field: "W".into() })?
        .inverse();

    // unit-normalized rows; vacuous zero rows are skipped
    let mut norms = vec![0.0; rows];
    let mut cn = DMatrix::zeros(rows, n);
    let mut hn = DVector::zeros(rows);
    for j in 0..rows {
        let nrm = c.row(j).norm();
        norms[j] = nrm;
        if nrm == 0.0 {
            if h[j] < -settings.feas_tol {
                return Err(Error::QpInfeasible);
            }
            continue;
        }
        cn.set_row(j, &(c.row(j) / nrm));
        hn[j] = h[j] / nrm;
    }

    let mut u = -(&ginv * q);
    let mut active: Vec<usize> = Vec::new();
    let mut mu_active: Vec<f64> = Vec::new();
    let mut iterations = 0;

    loop {
        // most violated inactive constraint
        let mut worst: Option<(usize, f64)> = None;
        for j in 0..rows {
            if norms[j] == 0.0 || active.contains(&j) {
                continue;
            }
            let s = cn.row(j).dot(&u.transpose()) - hn[j];
            if s > settings.feas_tol && worst.is_none_or(|(_, ws)| s > ws) {
                worst = Some((j, s));
            }
        }
        let Some((p, _)) = worst else { break };
        let cp = cn.row(p).transpose();
        let mut mu_p = 0.0;

        loop {
            iterations += 1;
            if iterations > settings.max_iter {
                return Err(Error::QpMaxIter(settings.max_iter));
            }
            let ginv_cp = &ginv * &cp;
            let (du, dmu) = if active.is_empty() {
                (-ginv_cp.clone(), DVector::zeros(0))
            } else {
                let ca = cn.select_rows(active.iter());
                let s_mat = &ca * &ginv * ca.transpose();
                let rhs = &ca * &ginv_cp;
                let dmu = -solve_spd(&s_mat, &rhs)?;
                let du = -(&ginv_cp + &ginv * ca.transpose() * &dmu);
                (du, dmu)
            };
            let curvature = -cp.dot(&du);
            let violation = cp.dot(&u) - hn[p];
            let t2 = if curvature > 1e-14 {
                (violation / curvature).max(0.0)
            } else {
                f64::INFINITY
            };
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for (idx, (&m, &d)) in mu_active.iter().zip(dmu.iter()).enumerate() {
                if d < -1e-14 {
                    let r = m / -d;
                    if r < t1 {
                        t1 = r;
                        drop = Some(idx);
                    }
                }
            }
            if t1.is_infinite() && t2.is_infinite() {
                return Err(Error::QpInfeasible);
            }
            let t = t1.min(t2);
            if t2.is_finite() {
                u += &du * t;
            }
            for (m, d) in mu_active.iter_mut().zip(dmu.iter()) {
                *m += t * d;
            }
            mu_p += t;
            if t2 <= t1 {
                active.push(p);
                mu_active.push(mu_p);
                break;
            }
            let k = drop.expect("finite partial step has a blocking constraint");
            active.remove(k);
            mu_active.remove(k);
        }
    }

    let mut multipliers = DVector::zeros(rows);
    for (&j, &m) in active.iter().zip(mu_active.iter()) {
        multipliers[j] = m.max(0.0) / norms[j];
    }
    let value = (u.transpose() * w * &u)[(0, 0)] + q.dot(&u);
    Ok(QpSolution { u, multipliers, value, iterations })
}

fn solve_spd(s: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(ch) = s.clone().cholesky() {
        return Ok(ch.solve(rhs));
    }
    s.clone().lu().solve(rhs).ok_or(Error::QpMaxIter(0))
}

/// Inner problem of the dual iteration: `argmin uᵀWu + qᵀu` over `feas`.
pub fn solve_inner(cost_w: &DMatrix<f64>, q: &DVector<f64>, feas: &Polytope) -> Result<DVector<f64>> {
    solve_qp(cost_w, q, feas.g(), feas.h(), &QpSettings::default()).map(|s| s.u)
}

/// One subsystem's data for the centralized problem.
#[derive(Debug, Clone, Copy)]
pub struct LocalQp<'a> {
    pub cp: &'a CondensedProblem,
    pub x: &'a DVector<f64>,
    /// Input polytope `𝒰_T(x)` for this state.
    pub feas: &'a Polytope,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentralSolution {
    pub u: Vec<DVector<f64>>,
    pub costs: Vec<f64>,
    pub j_star: f64,
    /// Multipliers of the coupling rows, i.e. the dual optimum `λ*`.
    pub lambda: DVector<f64>,
}

/// Solves the joint problem `min Σ Jⁱ` with local input sets and the
/// tightened coupling `Σ (ConsFⁱ xⁱ + ConsHⁱ uⁱ) ⪯ b(ε)`.
pub fn centralized_solve(locals: &[LocalQp<'_>], b_eps: &DVector<f64>) -> Result<CentralSolution> {
    if locals.is_empty() {
        return Err(Error::Dimension("centralized_solve needs at least one subsystem".into()));
    }
    let dual = b_eps.len();
    let dims: Vec<usize> = locals.iter().map(|l| l.cp.input_dim()).collect();
    let total: usize = dims.iter().sum();
    let local_rows: usize = locals.iter().map(|l| l.feas.n_rows()).sum();
    for l in locals {
        if l.cp.dual_dim() != dual || l.feas.dim() != l.cp.input_dim() {
            return Err(Error::Dimension("centralized_solve: inconsistent subsystem data".into()));
        }
    }

    let mut w = DMatrix::zeros(total, total);
    let mut q = DVector::zeros(total);
    let mut c = DMatrix::zeros(local_rows + dual, total);
    let mut h = DVector::zeros(local_rows + dual);
    let mut rhs = b_eps.clone();
    let (mut col, mut row) = (0, 0);
    for (l, &d) in locals.iter().zip(dims.iter()) {
        w.view_mut((col, col), (d, d)).copy_from(&l.cp.cost_w);
        q.rows_mut(col, d).copy_from(&(&l.cp.cost_f * l.x * 2.0));
        let r = l.feas.n_rows();
        c.view_mut((row, col), (r, d)).copy_from(l.feas.g());
        h.rows_mut(row, r).copy_from(l.feas.h());
        c.view_mut((local_rows, col), (dual, d)).copy_from(&l.cp.cons_h);
        rhs -= &l.cp.cons_f * l.x;
        col += d;
        row += r;
    }
    h.rows_mut(local_rows, dual).copy_from(&rhs);

    let sol = solve_qp(&w, &q, &c, &h, &QpSettings::default())?;
    let mut u = Vec::with_capacity(locals.len());
    let mut costs = Vec::with_capacity(locals.len());
    let mut col = 0;
    for (l, &d) in locals.iter().zip(dims.iter()) {
        let ui = sol.u.rows(col, d).into_owned();
        costs.push(l.cp.cost(l.x, &ui));
        u.push(ui);
        col += d;
    }
    Ok(CentralSolution {
        j_star: costs.iter().sum(),
        u,
        costs,
        lambda: sol.multipliers.rows(local_rows, dual).into_owned(),
    })
}
