//! Halfspace-represented polytopes `{x : Gx ⪯ h}` and the invariant-set
//! computations built on top of them.

mod invariant;
pub mod lp;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use invariant::{max_invariant_subset, mpi_set, terminal_set, DEFAULT_MPI_CAP};
pub use lp::LpSolution;

/// Tolerance used by the LP-based subset and redundancy tests.
pub const SUBSET_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPolytope", into = "RawPolytope")]
pub struct Polytope {
    g: DMatrix<f64>,
    h: DVector<f64>,
}

/// Row-major serialized form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawPolytope {
    pub g: Vec<Vec<f64>>,
    pub h: Vec<f64>,
}

impl TryFrom<RawPolytope> for Polytope {
    type Error = Error;

    fn try_from(raw: RawPolytope) -> Result<Self> {
        let rows = raw.g.len();
        let n = raw.g.first().map_or(0, Vec::len);
        if raw.g.iter().any(|r| r.len() != n) {
            return Err(Error::Dimension("polytope rows have unequal length".into()));
        }
        let flat: Vec<f64> = raw.g.into_iter().flatten().collect();
        Polytope::new(
            DMatrix::from_row_slice(rows, n, &flat),
            DVector::from_vec(raw.h),
        )
    }
}

impl From<Polytope> for RawPolytope {
    fn from(p: Polytope) -> Self {
        RawPolytope {
            g: p.g.row_iter().map(|r| r.iter().copied().collect()).collect(),
            h: p.h.iter().copied().collect(),
        }
    }
}

impl Polytope {
    pub fn new(g: DMatrix<f64>, h: DVector<f64>) -> Result<Self> {
        if g.nrows() != h.len() {
            return Err(Error::Dimension(format!(
                "polytope: G has {} rows but h has {}",
                g.nrows(),
                h.len()
            )));
        }
        if g.nrows() == 0 || g.ncols() == 0 {
            return Err(Error::Dimension("polytope needs at least one row and column".into()));
        }
        if h.iter().any(|v| !v.is_finite()) || g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dimension("polytope data must be finite".into()));
        }
        for i in 0..g.nrows() {
            if g.row(i).amax() == 0.0 && h[i] < 0.0 {
                return Err(Error::Dimension(format!(
                    "polytope row {i} is all-zero with negative bound"
                )));
            }
        }
        Ok(Self { g, h })
    }

    /// Axis-aligned box `lo ⪯ x ⪯ hi`.
    pub fn from_box(lo: &[f64], hi: &[f64]) -> Self {
        let n = lo.len();
        assert_eq!(n, hi.len());
        let mut g = DMatrix::zeros(2 * n, n);
        let mut h = DVector::zeros(2 * n);
        for i in 0..n {
            g[(i, i)] = 1.0;
            h[i] = hi[i];
            g[(n + i, i)] = -1.0;
            h[n + i] = -lo[i];
        }
        Self { g, h }
    }

    /// The whole space `ℝⁿ`, represented by a single vacuous row.
    pub fn universe(n: usize) -> Self {
        Self {
            g: DMatrix::zeros(1, n),
            h: DVector::from_element(1, 1.0),
        }
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn h(&self) -> &DVector<f64> {
        &self.h
    }

    pub fn dim(&self) -> usize {
        self.g.ncols()
    }

    pub fn n_rows(&self) -> usize {
        self.g.nrows()
    }

    /// `Gx ⪯ h + tol·1`.
    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        assert_eq!(x.len(), self.dim(), "contains: dimension mismatch");
        let gx = &self.g * x;
        gx.iter().zip(self.h.iter()).all(|(a, b)| *a <= b + tol)
    }

    /// Largest constraint violation `max_i (g_iᵀx − h_i)`; nonpositive inside.
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let gx = &self.g * x;
        gx.iter()
            .zip(self.h.iter())
            .map(|(a, b)| a - b)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// True when the origin satisfies every row strictly.
    pub fn origin_in_interior(&self) -> bool {
        self.h.iter().all(|&v| v > 0.0)
    }

    pub fn intersect(&self, other: &Polytope) -> Polytope {
        assert_eq!(self.dim(), other.dim(), "intersect: dimension mismatch");
        let mut g = DMatrix::zeros(self.n_rows() + other.n_rows(), self.dim());
        g.rows_mut(0, self.n_rows()).copy_from(&self.g);
        g.rows_mut(self.n_rows(), other.n_rows()).copy_from(&other.g);
        let h = crate::linalg::stack(&[&self.h, &other.h]);
        Polytope { g, h }
    }

    /// `{x : G·(M x) ⪯ h}`, the preimage under the linear map `M`.
    pub fn preimage(&self, m: &DMatrix<f64>) -> Polytope {
        Polytope {
            g: &self.g * m,
            h: self.h.clone(),
        }
    }

    /// `{x : G (M x + c) ⪯ h}`, the preimage under an affine map.
    pub fn affine_preimage(&self, m: &DMatrix<f64>, c: &DVector<f64>) -> Polytope {
        Polytope {
            g: &self.g * m,
            h: &self.h - &self.g * c,
        }
    }

    /// Maximizes `cᵀx` over the polytope.
    pub fn maximize(&self, c: &DVector<f64>) -> Result<LpSolution> {
        lp::maximize(c, &self.g, &self.h)
    }

    pub fn is_empty(&self) -> Result<bool> {
        match lp_solve(&DVector::zeros(self.dim()), self) {
            Ok(_) => Ok(false),
            Err(Error::LpInfeasible) => Ok(true),
            Err(e) => Err(e),
        }
    }

    /// `self ⊆ other`, checked row-by-row with one LP per row of `other`.
    pub fn is_subset_of(&self, other: &Polytope) -> Result<bool> {
        for i in 0..other.n_rows() {
            let c = other.g.row(i).transpose();
            match self.maximize(&c) {
                Ok(s) if s.value <= other.h[i] + SUBSET_TOL => {}
                Ok(_) | Err(Error::LpUnbounded) => return Ok(false),
                Err(e) => return Err(e),
            }
        }
        Ok(true)
    }

    /// Drops vacuous rows, scales rows to unit 2-norm and removes exact duplicates.
    pub fn normalized(&self) -> Polytope {
        let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
        for i in 0..self.n_rows() {
            let norm = self.g.row(i).norm();
            if norm == 0.0 {
                continue;
            }
            let r: Vec<f64> = self.g.row(i).iter().map(|v| v / norm).collect();
            let b = self.h[i] / norm;
            let dup = rows.iter_mut().find(|(q, _)| {
                q.iter().zip(r.iter()).all(|(a, c)| (a - c).abs() <= 1e-12)
            });
            match dup {
                Some((_, hb)) => *hb = hb.min(b),
                None => rows.push((r, b)),
            }
        }
        if rows.is_empty() {
            return Polytope::universe(self.dim());
        }
        from_rows(self.dim(), &rows)
    }

    /// Removes every row that is implied by the others (LP certificate per row).
    pub fn remove_redundant(&self) -> Result<Polytope> {
        let base = self.normalized();
        let n = base.dim();
        let mut rows: Vec<(Vec<f64>, f64)> = (0..base.n_rows())
            .map(|i| (base.g.row(i).iter().copied().collect(), base.h[i]))
            .collect();
        if rows.iter().all(|(r, _)| r.iter().all(|v| *v == 0.0)) {
            return Ok(base);
        }
        let mut i = 0;
        while i < rows.len() {
            if rows.len() == 1 {
                break;
            }
            let others: Vec<(Vec<f64>, f64)> = rows
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, r)| r.clone())
                .collect();
            let rest = from_rows(n, &others);
            let c = DVector::from_vec(rows[i].0.clone());
            let redundant = match rest.maximize(&c) {
                Ok(s) => s.value <= rows[i].1 + SUBSET_TOL,
                Err(Error::LpUnbounded) => false,
                Err(e) => return Err(e),
            };
            if redundant {
                rows.remove(i);
            } else {
                i += 1;
            }
        }
        Ok(from_rows(n, &rows))
    }
}

fn from_rows(n: usize, rows: &[(Vec<f64>, f64)]) -> Polytope {
    let flat: Vec<f64> = rows.iter().flat_map(|(r, _)| r.iter().copied()).collect();
    Polytope {
        g: DMatrix::from_row_slice(rows.len(), n, &flat),
        h: DVector::from_iterator(rows.len(), rows.iter().map(|(_, b)| *b)),
    }
}

/// Maximizer and optimal value of `cᵀx` over `p`.
pub fn lp_solve(c: &DVector<f64>, p: &Polytope) -> Result<(DVector<f64>, f64)> {
    let s = p.maximize(c)?;
    Ok((s.x, s.value))
}

pub fn contains(p: &Polytope, x: &DVector<f64>, tol: f64) -> bool {
    p.contains(x, tol)
}
