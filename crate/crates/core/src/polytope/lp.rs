//! Dense two-phase simplex with Bland's anti-cycling rule.
//!
//! Solves `max cᵀx s.t. Gx ⪯ h` with `x` free by splitting `x = x⁺ − x⁻`
//! and adding one slack per row. Intended for desk-scale problems (a few
//! hundred rows at most).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const PIVOT_TOL: f64 = 1e-11;
const COST_TOL: f64 = 1e-10;
const FEAS_TOL: f64 = 1e-9;

/// Optimal point and value of a linear program.
#[derive(Debug, Clone)]
pub struct LpSolution {
    pub x: DVector<f64>,
    pub value: f64,
}

struct Tableau {
    // rows × (cols + 1); last column is the right-hand side
    t: Vec<Vec<f64>>,
    basis: Vec<usize>,
    cols: usize,
}

impl Tableau {
    fn pivot(&mut self, row: usize, col: usize) {
        let piv = self.t[row][col];
        for v in self.t[row].iter_mut() {
            *v /= piv;
        }
        let pivot_row = self.t[row].clone();
        for (i, r) in self.t.iter_mut().enumerate() {
            if i == row {
                continue;
            }
            let f = r[col];
            if f != 0.0 {
                for (v, p) in r.iter_mut().zip(pivot_row.iter()) {
                    *v -= f * p;
                }
                r[col] = 0.0;
            }
        }
        self.basis[row] = col;
    }

    /// Maximizes `cost · columns` over the current basis, using only columns
    /// flagged in `allowed`. Returns `Err(LpUnbounded)` on an unbounded ray.
    fn maximize(&mut self, cost: &[f64], allowed: &[bool]) -> Result<()> {
        let rhs = self.cols;
        let max_pivots = 50_000 + 200 * (self.t.len() + self.cols);
        for _ in 0..max_pivots {
            // reduced costs r_j = c_j − Σ_i c_{B(i)} t_ij
            let mut entering = None;
            for j in 0..self.cols {
                if !allowed[j] || self.basis.contains(&j) {
                    continue;
                }
                let mut r = cost[j];
                for (i, row) in self.t.iter().enumerate() {
                    r -= cost[self.basis[i]] * row[j];
                }
                if r > COST_TOL {
                    entering = Some(j);
                    break;
                }
            }
            let Some(col) = entering else {
                return Ok(());
            };
            let mut leave: Option<(usize, f64)> = None;
            for (i, row) in self.t.iter().enumerate() {
                if row[col] > PIVOT_TOL {
                    let ratio = row[rhs] / row[col];
                    leave = match leave {
                        None => Some((i, ratio)),
                        Some((li, lr)) => {
                            if ratio < lr - 1e-14
                                || (ratio <= lr + 1e-14 && self.basis[i] < self.basis[li])
                            {
                                Some((i, ratio))
                            } else {
                                Some((li, lr))
                            }
                        }
                    };
                }
            }
            let Some((row, _)) = leave else {
                return Err(Error::LpUnbounded);
            };
            self.pivot(row, col);
        }
        // Bland's rule cannot cycle; hitting this means numerical trouble.
        Err(Error::LpUnbounded)
    }
}

/// Maximizes `cᵀx` subject to `g x ⪯ h`.
pub fn maximize(c: &DVector<f64>, g: &DMatrix<f64>, h: &DVector<f64>) -> Result<LpSolution> {
    let (rows, n) = g.shape();
    if c.len() != n || h.len() != rows {
        return Err(Error::Dimension(format!(
            "lp: c has {} entries, G is {}x{}, h has {}",
            c.len(),
            rows,
            n,
            h.len()
        )));
    }
    let negative: Vec<usize> = (0..rows).filter(|&i| h[i] < 0.0).collect();
    // columns: x⁺ (n) | x⁻ (n) | slacks (rows) | artificials (negative.len())
    let n_art = negative.len();
    let cols = 2 * n + rows + n_art;
    let mut t = vec![vec![0.0; cols + 1]; rows];
    let mut basis = vec![0; rows];
    let mut art = 0;
    for i in 0..rows {
        let sign = if h[i] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n {
            t[i][j] = sign * g[(i, j)];
            t[i][n + j] = -sign * g[(i, j)];
        }
        t[i][2 * n + i] = sign;
        t[i][cols] = sign * h[i];
        if sign < 0.0 {
            t[i][2 * n + rows + art] = 1.0;
            basis[i] = 2 * n + rows + art;
            art += 1;
        } else {
            basis[i] = 2 * n + i;
        }
    }
    let mut tab = Tableau { t, basis, cols };
    let first_art = 2 * n + rows;

    if n_art > 0 {
        let mut cost = vec![0.0; cols];
        for c in cost.iter_mut().skip(first_art) {
            *c = -1.0;
        }
        let allowed = vec![true; cols];
        tab.maximize(&cost, &allowed)?;
        let infeas: f64 = tab
            .basis
            .iter()
            .enumerate()
            .filter(|(_, &b)| b >= first_art)
            .map(|(i, _)| tab.t[i][cols])
            .sum();
        if infeas > FEAS_TOL * (1.0 + h.amax()) {
            return Err(Error::LpInfeasible);
        }
        // drive remaining (zero-valued) artificials out of the basis
        let mut i = 0;
        while i < tab.t.len() {
            if tab.basis[i] >= first_art {
                let col = (0..first_art).find(|&j| tab.t[i][j].abs() > 1e-9);
                match col {
                    Some(j) => {
                        tab.pivot(i, j);
                        i += 1;
                    }
                    None => {
                        tab.t.remove(i);
                        tab.basis.remove(i);
                    }
                }
            } else {
                i += 1;
            }
        }
    }

    let mut cost = vec![0.0; cols];
    for j in 0..n {
        cost[j] = c[j];
        cost[n + j] = -c[j];
    }
    let allowed: Vec<bool> = (0..cols).map(|j| j < first_art).collect();
    tab.maximize(&cost, &allowed)?;

    let mut x = DVector::zeros(n);
    for (i, &b) in tab.basis.iter().enumerate() {
        if b < n {
            x[b] += tab.t[i][cols];
        } else if b < 2 * n {
            x[b - n] -= tab.t[i][cols];
        }
    }
    let value = c.dot(&x);
    Ok(LpSolution { x, value })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(n: usize) -> (DMatrix<f64>, DVector<f64>) {
        let mut g = DMatrix::zeros(2 * n, n);
        for i in 0..n {
            g[(i, i)] = 1.0;
            g[(n + i, i)] = -1.0;
        }
        (g, DVector::from_element(2 * n, 1.0))
    }

    #[test]
    fn interval_endpoint() {
        let (g, h) = bx(1);
        let s = maximize(&DVector::from_vec(vec![1.0]), &g, &h).unwrap();
        assert!((s.value - 1.0).abs() < 1e-12);
        assert!((s.x[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn box_corner() {
        let (g, h) = bx(2);
        let s = maximize(&DVector::from_vec(vec![1.0, 1.0]), &g, &h).unwrap();
        assert!((s.value - 2.0).abs() < 1e-12);
    }

    #[test]
    fn simplex_vertex_matches_enumeration() {
        // x ⪰ 0, x1 + x2 ≤ 1; vertices (0,0), (1,0), (0,1)
        let g = DMatrix::from_row_slice(3, 2, &[-1.0, 0.0, 0.0, -1.0, 1.0, 1.0]);
        let h = DVector::from_vec(vec![0.0, 0.0, 1.0]);
        let c = DVector::from_vec(vec![2.0, 1.0]);
        let vertices = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let best = vertices
            .iter()
            .map(|v| c[0] * v[0] + c[1] * v[1])
            .fold(f64::MIN, f64::max);
        let s = maximize(&c, &g, &h).unwrap();
        assert!((s.value - best).abs() < 1e-12);
        assert!((s.x[0] - 1.0).abs() < 1e-12 && s.x[1].abs() < 1e-12);
    }

    #[test]
    fn negative_rhs_needs_phase_one() {
        // 2 ≤ x ≤ 3
        let g = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let h = DVector::from_vec(vec![3.0, -2.0]);
        let s = maximize(&DVector::from_vec(vec![-1.0]), &g, &h).unwrap();
        assert!((s.x[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn detects_infeasible_and_unbounded() {
        let g = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let h = DVector::from_vec(vec![-1.0, -1.0]);
        assert_eq!(
            maximize(&DVector::from_vec(vec![1.0]), &g, &h).unwrap_err(),
            Error::LpInfeasible
        );
        let g = DMatrix::from_row_slice(1, 1, &[-1.0]);
        let h = DVector::from_vec(vec![0.0]);
        assert_eq!(
            maximize(&DVector::from_vec(vec![1.0]), &g, &h).unwrap_err(),
            Error::LpUnbounded
        );
    }
}
