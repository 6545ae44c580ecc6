#![allow(dead_code)]

use apdg_core::config::watertank;
use apdg_core::dmpc::{build_problem, DmpcConfig, DmpcProblem};
use apdg_core::model::LtiSubsystem;
use apdg_core::polytope::Polytope;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn mat(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(r, c, v)
}

pub fn vec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}

pub fn tank() -> LtiSubsystem {
    LtiSubsystem::new(
        mat(2, 2, &[0.8750, 0.1250, 0.1250, 0.8047]),
        mat(2, 1, &[0.3, 0.0]),
        DMatrix::identity(2, 2) * 5.0,
        mat(1, 1, &[1.0]),
        Polytope::from_box(&[-2.0, -2.0], &[2.0, 2.0]),
        Polytope::from_box(&[-1.0], &[1.0]),
        DMatrix::zeros(2, 2),
        mat(2, 1, &[1.0 / 1.5, -1.0 / 1.5]),
    )
    .unwrap()
}

/// Scalar system with box state and input sets and coupling `cg x + dg u`.
pub fn scalar(a: f64, b: f64, xmax: f64, umax: f64, cg: f64, dg: f64) -> LtiSubsystem {
    LtiSubsystem::new(
        mat(1, 1, &[a]),
        mat(1, 1, &[b]),
        mat(1, 1, &[1.0]),
        mat(1, 1, &[1.0]),
        Polytope::from_box(&[-xmax], &[xmax]),
        Polytope::from_box(&[-umax], &[umax]),
        mat(1, 1, &[cg]),
        mat(1, 1, &[dg]),
    )
    .unwrap()
}

pub fn water_tank() -> (DmpcConfig, DmpcProblem) {
    let cfg = watertank();
    let problem = build_problem(&cfg).unwrap();
    (cfg, problem)
}

/// Water-tank setup with the input budget `|Σu| ≤ budget` instead of 1.5.
pub fn water_tank_budget(budget: f64) -> (DmpcConfig, DmpcProblem) {
    let mut cfg = watertank();
    for s in &mut cfg.subsystems {
        s.dg = &s.dg * (1.5 / budget);
    }
    let problem = build_problem(&cfg).unwrap();
    (cfg, problem)
}

/// Axis-aligned bounding box of a bounded polytope, via LPs.
pub fn bounding_box(p: &Polytope) -> (Vec<f64>, Vec<f64>) {
    let n = p.dim();
    let mut lo = vec![0.0; n];
    let mut hi = vec![0.0; n];
    for i in 0..n {
        let mut e = DVector::zeros(n);
        e[i] = 1.0;
        hi[i] = p.maximize(&e).unwrap().value;
        e[i] = -1.0;
        lo[i] = -p.maximize(&e).unwrap().value;
    }
    (lo, hi)
}

/// Rejection samples from a bounded polytope.
pub fn sample_inside(p: &Polytope, count: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    let (lo, hi) = bounding_box(p);
    let mut out = Vec::with_capacity(count);
    let mut tries = 0;
    while out.len() < count {
        tries += 1;
        assert!(tries < 1000 * count, "polytope too thin to sample");
        let x = DVector::from_fn(p.dim(), |i, _| rng.random_range(lo[i]..=hi[i]));
        if p.contains(&x, 0.0) {
            out.push(x);
        }
    }
    out
}

/// Boundary points hit by random rays from the origin (origin must be interior).
pub fn sample_boundary(p: &Polytope, count: usize, rng: &mut ChaCha8Rng) -> Vec<DVector<f64>> {
    (0..count)
        .map(|_| {
            let d = DVector::from_fn(p.dim(), |_, _| rng.random_range(-1.0..=1.0));
            let t = (0..p.n_rows())
                .filter_map(|r| {
                    let gd = p.g().row(r).dot(&d.transpose());
                    (gd > 0.0).then(|| p.h()[r] / gd)
                })
                .fold(f64::INFINITY, f64::min);
            d * t
        })
        .collect()
}
