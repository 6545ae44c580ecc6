//! Subsystem dynamics, horizon condensation, LQR synthesis and the
//! convexity constants of the dual problem.

use log::info;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{eigen_extremes, is_symmetric_positive_definite, spectral_radius};
use crate::polytope::Polytope;

const DARE_TOL: f64 = 1e-12;
const DARE_MAX_ITER: usize = 100_000;
/// `λ_min(HHᵀ)` below this (relative to `λ_max`) is treated as singular.
const SINGULAR_REL: f64 = 1e-12;

/// One subsystem `x⁺ = Ax + Bu` with stage weights, local sets and its share
/// `Cg x + Dg u` of the coupling constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct LtiSubsystem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub x_set: Polytope,
    pub u_set: Polytope,
    pub cg: DMatrix<f64>,
    pub dg: DMatrix<f64>,
}

impl LtiSubsystem {
    /// Builds and validates a subsystem.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        x_set: Polytope,
        u_set: Polytope,
        cg: DMatrix<f64>,
        dg: DMatrix<f64>,
    ) -> Result<Self> {
        let sys = Self { a, b, q, r, x_set, u_set, cg, dg };
        sys.validate()?;
        Ok(sys)
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn rho(&self) -> usize {
        self.cg.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m, rho) = (self.n(), self.m(), self.rho());
        let dims = [
            ("A", self.a.shape(), (n, n)),
            ("B", self.b.shape(), (n, m)),
            ("Q", self.q.shape(), (n, n)),
            ("R", self.r.shape(), (m, m)),
            ("Cg", self.cg.shape(), (rho, n)),
            ("Dg", self.dg.shape(), (rho, m)),
        ];
        for (field, got, want) in dims {
            if got != want {
                return Err(Error::Dimension(format!("{field} is {got:?}, expected {want:?}")));
            }
        }
        if n == 0 || m == 0 || rho == 0 {
            return Err(Error::Dimension("n, m and rho must be positive".into()));
        }
        if self.x_set.dim() != n {
            return Err(Error::Dimension(format!("X lives in R^{}, expected R^{n}", self.x_set.dim())));
        }
        if self.u_set.dim() != m {
            return Err(Error::Dimension(format!("U lives in R^{}, expected R^{m}", self.u_set.dim())));
        }
        if !is_symmetric_positive_definite(&self.q) {
            return Err(Error::NotPositiveDefinite { field: "Q".into() });
        }
        if !is_symmetric_positive_definite(&self.r) {
            return Err(Error::NotPositiveDefinite { field: "R".into() });
        }
        if !self.x_set.origin_in_interior() {
            return Err(Error::OriginNotInterior { field: "X".into() });
        }
        if !self.u_set.origin_in_interior() {
            return Err(Error::OriginNotInterior { field: "U".into() });
        }
        Ok(())
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }
}

/// One Riccati map `Q + AᵀPA − AᵀPB (R + BᵀPB)⁻¹ BᵀPA`.
pub fn dare_map(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> DMatrix<f64> {
    let bt_p = b.transpose() * p;
    let s = r + &bt_p * b;
    let gain = s
        .cholesky()
        .expect("R + BᵀPB is positive definite for P ⪰ 0")
        .solve(&(&bt_p * a));
    let next = q + a.transpose() * p * a - a.transpose() * p * b * gain;
    (&next + next.transpose()) * 0.5
}

/// LQR gain `K = −(R + BᵀPB)⁻¹ BᵀPA`.
pub fn lqr_gain(a: &DMatrix<f64>, b: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> DMatrix<f64> {
    let bt_p = b.transpose() * p;
    let s = r + &bt_p * b;
    -s.cholesky()
        .expect("R + BᵀPB is positive definite for P ⪰ 0")
        .solve(&(&bt_p * a))
}

/// Solves the discrete algebraic Riccati equation by fixed-point iteration
/// from `P₀ = Q` and returns `(P, K)`.
pub fn dare_solve(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = a.nrows();
    if a.shape() != (n, n) || b.nrows() != n || q.shape() != (n, n) || r.shape() != (b.ncols(), b.ncols()) {
        return Err(Error::Dimension("dare_solve: inconsistent A, B, Q, R".into()));
    }
    if !is_symmetric_positive_definite(q) {
        return Err(Error::NotPositiveDefinite { field: "Q".into() });
    }
    if !is_symmetric_positive_definite(r) {
        return Err(Error::NotPositiveDefinite { field: "R".into() });
    }
    let mut p = q.clone();
    let mut residual = f64::INFINITY;
    for _ in 0..DARE_MAX_ITER {
        let next = dare_map(a, b, q, r, &p);
        residual = (&next - &p).amax();
        let scale = next.amax().max(1.0);
        p = next;
        if !residual.is_finite() {
            break;
        }
        if residual <= DARE_TOL * scale {
            let k = lqr_gain(a, b, r, &p);
            let radius = spectral_radius(&(a + b * &k));
            if radius >= 1.0 {
                return Err(Error::UnstableClosedLoop(radius));
            }
            return Ok((p, k));
        }
    }
    Err(Error::DareNotConverged { iterations: DARE_MAX_ITER, residual })
}

/// Stacked prediction and cost matrices of one subsystem over horizon `N`.
///
/// With `u = col(u₀,…,u_{N−1})` the horizon cost is
/// `J(x,u) = uᵀWu + 2uᵀFx + xᵀHx` and the coupling rows are `ConsF x + ConsH u`.
#[derive(Debug, Clone, PartialEq)]
pub struct CondensedProblem {
    pub horizon: usize,
    pub abar: DMatrix<f64>,
    pub bbar: DMatrix<f64>,
    pub cost_w: DMatrix<f64>,
    pub cost_f: DMatrix<f64>,
    pub cost_h: DMatrix<f64>,
    pub cons_f: DMatrix<f64>,
    pub cons_h: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub mu: f64,
    pub ell: f64,
    pub theta: f64,
    pub lip: f64,
    pub n: usize,
    pub m: usize,
    pub rho: usize,
}

pub fn condense(sys: &LtiSubsystem, horizon: usize) -> Result<CondensedProblem> {
    if horizon == 0 {
        return Err(Error::Dimension("horizon must be at least 1".into()));
    }
    sys.validate()?;
    let (n, m, rho) = (sys.n(), sys.m(), sys.rho());
    let big_n = horizon;
    let (p, k) = dare_solve(&sys.a, &sys.b, &sys.q, &sys.r)?;

    // powers[ℓ] = Aˡ for ℓ = 0..=N
    let mut powers = vec![DMatrix::identity(n, n)];
    for l in 1..=big_n {
        let next = &powers[l - 1] * &sys.a;
        powers.push(next);
    }

    let mut abar = DMatrix::zeros((big_n + 1) * n, n);
    let mut bbar = DMatrix::zeros((big_n + 1) * n, big_n * m);
    for l in 0..=big_n {
        abar.view_mut((l * n, 0), (n, n)).copy_from(&powers[l]);
        for j in 0..l {
            let blk = &powers[l - 1 - j] * &sys.b;
            bbar.view_mut((l * n, j * m), (n, m)).copy_from(&blk);
        }
    }

    let mut qbar = DMatrix::zeros((big_n + 1) * n, (big_n + 1) * n);
    for l in 0..big_n {
        qbar.view_mut((l * n, l * n), (n, n)).copy_from(&sys.q);
    }
    qbar.view_mut((big_n * n, big_n * n), (n, n)).copy_from(&p);
    let mut rbar = DMatrix::zeros(big_n * m, big_n * m);
    for l in 0..big_n {
        rbar.view_mut((l * m, l * m), (m, m)).copy_from(&sys.r);
    }

    let bt_q = bbar.transpose() * &qbar;
    let cost_w = &bt_q * &bbar + rbar;
    let cost_w = (&cost_w + cost_w.transpose()) * 0.5;
    let cost_f = &bt_q * &abar;
    let cost_h = abar.transpose() * &qbar * &abar;
    let cost_h = (&cost_h + cost_h.transpose()) * 0.5;

    let mut cons_f = DMatrix::zeros(big_n * rho, n);
    let mut cons_h = DMatrix::zeros(big_n * rho, big_n * m);
    for l in 0..big_n {
        cons_f.view_mut((l * rho, 0), (rho, n)).copy_from(&(&sys.cg * &powers[l]));
        cons_h.view_mut((l * rho, l * m), (rho, m)).copy_from(&sys.dg);
        for j in 0..l {
            let blk = &sys.cg * &powers[l - 1 - j] * &sys.b;
            cons_h.view_mut((l * rho, j * m), (rho, m)).copy_from(&blk);
        }
    }

    let (mu, ell) = eigen_extremes(&(&cost_w * 2.0));
    let (hh_min, hh_max) = eigen_extremes(&(&cons_h * cons_h.transpose()));
    let theta = if hh_min <= SINGULAR_REL * hh_max.max(f64::MIN_POSITIVE) {
        info!("ConsH·ConsHᵀ is singular (λ_min = {hh_min:e}); dual is not strongly convex, theta = 0");
        0.0
    } else {
        hh_min / ell
    };
    let lip = hh_max.max(0.0) / mu;

    Ok(CondensedProblem {
        horizon,
        abar,
        bbar,
        cost_w,
        cost_f,
        cost_h,
        cons_f,
        cons_h,
        p,
        k,
        mu,
        ell,
        theta,
        lip,
        n,
        m,
        rho,
    })
}

impl CondensedProblem {
    /// Horizon cost `J(x,u)`.
    pub fn cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        (u.transpose() * &self.cost_w * u)[(0, 0)]
            + 2.0 * (u.transpose() * &self.cost_f * x)[(0, 0)]
            + (x.transpose() * &self.cost_h * x)[(0, 0)]
    }

    /// Coupling contribution `ConsF x + ConsH u` over the horizon.
    pub fn coupling(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.cons_f * x + &self.cons_h * u
    }

    /// Predicted states `col(x₀,…,x_N)`.
    pub fn predict(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.abar * x + &self.bbar * u
    }

    /// Linear term `2·CostF·x + ConsHᵀλ` of the inner QP at multiplier `λ`.
    pub fn inner_linear_term(&self, x: &DVector<f64>, lambda: &DVector<f64>) -> DVector<f64> {
        &self.cost_f * x * 2.0 + self.cons_h.transpose() * lambda
    }

    pub fn dual_dim(&self) -> usize {
        self.horizon * self.rho
    }

    pub fn input_dim(&self) -> usize {
        self.horizon * self.m
    }
}

/// `∇fⁱ = −(ConsF x + ConsH u − b(ε)/M)`.
pub fn gradient_f(
    cp: &CondensedProblem,
    x: &DVector<f64>,
    u: &DVector<f64>,
    b_eps: &DVector<f64>,
    m: usize,
) -> DVector<f64> {
    -(cp.coupling(x, u) - b_eps / m as f64)
}

/// Tightened coupling bound: block ℓ (0-based) is `(1 − M(ℓ+1)ε)·1_ρ`.
pub fn tightened_bound(horizon: usize, rho: usize, m: usize, eps: f64) -> DVector<f64> {
    DVector::from_fn(horizon * rho, |i, _| {
        let l = i / rho;
        1.0 - (m * (l + 1)) as f64 * eps
    })
}

/// Network-wide convexity constants: `ϑ = minᵢ ϑⁱ`, `L = maxᵢ Lⁱ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregateConstants {
    pub mu: f64,
    pub ell: f64,
    pub theta: f64,
    pub lip: f64,
}

pub fn aggregate_constants(problems: &[CondensedProblem]) -> AggregateConstants {
    AggregateConstants {
        mu: problems.iter().map(|p| p.mu).fold(f64::INFINITY, f64::min),
        ell: problems.iter().map(|p| p.ell).fold(0.0, f64::max),
        theta: problems.iter().map(|p| p.theta).fold(f64::INFINITY, f64::min),
        lip: problems.iter().map(|p| p.lip).fold(0.0, f64::max),
    }
}
