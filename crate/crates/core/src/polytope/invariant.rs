//! Maximal positively invariant sets of linear closed loops.

use nalgebra::{DMatrix, DVector};

use super::{Polytope, SUBSET_TOL};
use crate::error::{Error, Result};
use crate::model::LtiSubsystem;

/// Default cap on the determinedness index.
pub const DEFAULT_MPI_CAP: usize = 500;

/// Largest subset of `base` that is invariant under `x ↦ a_k x`.
///
/// Iterates `Ω_{j+1} = Ω_j ∩ {x : G₀ A_Kʲ⁺¹ x ⪯ h₀}` and stops once every
/// candidate row is implied by `Ω_j` (one LP per row).
pub fn max_invariant_subset(a_k: &DMatrix<f64>, base: &Polytope, cap: usize) -> Result<Polytope> {
    let n = base.dim();
    if a_k.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "closed-loop matrix is {:?}, set dimension is {n}",
            a_k.shape()
        )));
    }
    let base = base.normalized();
    if base.is_empty()? {
        return Err(Error::LpInfeasible);
    }
    let mut omega = base.clone();
    let mut power = a_k.clone();
    for _ in 0..cap {
        let candidate = base.preimage(&power);
        let mut fresh: Vec<usize> = Vec::new();
        for i in 0..candidate.n_rows() {
            let c = candidate.g().row(i).transpose();
            if c.amax() == 0.0 {
                continue;
            }
            match omega.maximize(&c) {
                Ok(s) if s.value <= candidate.h()[i] + SUBSET_TOL => {}
                Ok(_) | Err(Error::LpUnbounded) => fresh.push(i),
                Err(e) => return Err(e),
            }
        }
        if fresh.is_empty() {
            return omega.remove_redundant();
        }
        let g = candidate.g().select_rows(fresh.iter());
        let h = DVector::from_iterator(fresh.len(), fresh.iter().map(|&i| candidate.h()[i]));
        omega = omega.intersect(&Polytope::new(g, h)?);
        power = &power * a_k;
    }
    Err(Error::IterationLimit(cap))
}

/// Maximal positively invariant set of `x⁺ = A_K x` inside `{x ∈ X, Kx ∈ U}`.
pub fn mpi_set(
    a_k: &DMatrix<f64>,
    x_set: &Polytope,
    u_set: &Polytope,
    k: &DMatrix<f64>,
) -> Result<Polytope> {
    let base = x_set.intersect(&u_set.preimage(k));
    max_invariant_subset(a_k, &base, DEFAULT_MPI_CAP)
}

/// Terminal set: the invariant subset of
/// `X ∩ {Kx ∈ U} ∩ {(C + D K) x ⪯ σ·1}` under the LQR closed loop.
pub fn terminal_set(sys: &LtiSubsystem, k: &DMatrix<f64>, sigma: f64) -> Result<Polytope> {
    let a_k = &sys.a + &sys.b * k;
    let coupling = &sys.cg + &sys.dg * k;
    let rho = coupling.nrows();
    let sigma_rows = Polytope::new(coupling, DVector::from_element(rho, sigma))
        .map_err(|_| Error::EmptyTerminalSet)?;
    let base = sys
        .x_set
        .intersect(&sys.u_set.preimage(k))
        .intersect(&sigma_rows);
    match max_invariant_subset(&a_k, &base, DEFAULT_MPI_CAP) {
        Ok(p) => {
            if p.is_empty()? {
                Err(Error::EmptyTerminalSet)
            } else {
                Ok(p)
            }
        }
        Err(Error::LpInfeasible) => Err(Error::EmptyTerminalSet),
        Err(e) => Err(e),
    }
}
