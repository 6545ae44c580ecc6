mod common;

use apdg_core::apdg::NodeContext;
use apdg_core::model::{condense, dare_map, dare_solve, gradient_f, tightened_bound};
use apdg_core::linalg::spectral_radius;
use apdg_core::qp::QpSettings;
use common::{mat, scalar, tank, vec, water_tank};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Horizon cost by forward simulation: Σ (xᵀQx + uᵀRu) + x_Nᵀ P x_N.
fn simulated_cost(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
    x0: &DVector<f64>,
    u: &DVector<f64>,
) -> f64 {
    let m = b.ncols();
    let mut x = x0.clone();
    let mut total = 0.0;
    for l in 0..u.len() / m {
        let ul = u.rows(l * m, m).into_owned();
        total += x.dot(&(q * &x)) + ul.dot(&(r * &ul));
        x = a * &x + b * &ul;
    }
    total + x.dot(&(p * &x))
}

fn eig_extremes(m: &DMatrix<f64>) -> (f64, f64) {
    let e = SymmetricEigen::new(m.clone()).eigenvalues;
    (e.min(), e.max())
}

#[test]
fn dare_zero_dynamics_gives_q() {
    let i2 = DMatrix::<f64>::identity(2, 2);
    let (p, k) = dare_solve(&DMatrix::zeros(2, 2), &i2, &i2, &i2).unwrap();
    assert!((p - &i2).amax() < 1e-14);
    assert!(k.amax() < 1e-14);
}

#[test]
fn dare_scalar_matches_quadratic_root() {
    let one = mat(1, 1, &[1.0]);
    let (p, k) = dare_solve(&mat(1, 1, &[0.5]), &one, &one, &one).unwrap();
    // p = 1 + 0.25 p − 0.25 p²/(1 + p)  ⇔  p² − 0.25 p − 1 = 0
    let root = (0.25 + (0.0625f64 + 4.0).sqrt()) / 2.0;
    assert!((p[0] - root).abs() < 1e-10, "{} vs {root}", p[0]);
    assert!((k[0] + 0.5 * root / (1.0 + root)).abs() < 1e-10);
}

#[test]
fn dare_residual_and_stability_on_tank() {
    let s = tank();
    let (p, k) = dare_solve(&s.a, &s.b, &s.q, &s.r).unwrap();
    assert!((dare_map(&s.a, &s.b, &s.q, &s.r, &p) - &p).amax() <= 1e-9);
    assert!(spectral_radius(&(&s.a + &s.b * &k)) < 1.0);
    assert!((&p - p.transpose()).amax() == 0.0);
}

#[test]
fn unit_horizon_keeps_only_terminal_block() {
    let s = tank();
    let cp = condense(&s, 1).unwrap();
    assert_eq!(cp.bbar.rows(0, 2).amax(), 0.0);
    assert_eq!(cp.bbar.rows(2, 2).into_owned(), s.b);
    let expect = s.b.transpose() * &cp.p * &s.b + &s.r;
    assert!((&cp.cost_w - expect).amax() < 1e-12);
}

#[test]
fn prediction_blocks_are_powers() {
    let s = tank();
    let cp = condense(&s, 5).unwrap();
    let mut pow = DMatrix::<f64>::identity(2, 2);
    let mut powers = vec![pow.clone()];
    for _ in 0..5 {
        pow = &s.a * pow;
        powers.push(pow.clone());
    }
    for l in 0..=5 {
        assert!((cp.abar.view((2 * l, 0), (2, 2)) - &powers[l]).amax() < 1e-13);
        for j in 0..5 {
            let block = cp.bbar.view((2 * l, j), (2, 1));
            if j < l {
                assert!((block - &powers[l - 1 - j] * &s.b).amax() < 1e-13);
            } else {
                assert_eq!(block.amax(), 0.0);
            }
        }
    }
}

#[test]
fn tank_dimensions_and_constants() {
    let cp = condense(&tank(), 8).unwrap();
    assert_eq!(cp.cost_w.shape(), (8, 8));
    assert_eq!(cp.cons_h.shape(), (16, 8));
    let (mu, ell) = eig_extremes(&(&cp.cost_w * 2.0));
    assert!((cp.mu - mu).abs() < 1e-9 * ell);
    assert!((cp.ell - ell).abs() < 1e-9 * ell);
    assert!(cp.mu < cp.ell);
    let (hmin, hmax) = eig_extremes(&(&cp.cons_h * cp.cons_h.transpose()));
    assert!(hmin.abs() < 1e-12);
    assert_eq!(cp.theta, 0.0);
    assert!((cp.lip - hmax / mu).abs() < 1e-9 * cp.lip);
}

#[test]
fn scalar_cost_identity() {
    let s = scalar(1.0, 1.0, 100.0, 100.0, 0.0, 1.0);
    let cp = condense(&s, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let x = vec(&[rng.random_range(-5.0..5.0)]);
        let u = DVector::from_fn(2, |_, _| rng.random_range(-5.0..5.0));
        let direct = simulated_cost(&s.a, &s.b, &s.q, &s.r, &cp.p, &x, &u);
        assert!((cp.cost(&x, &u) - direct).abs() <= 1e-10 * direct.max(1.0));
    }
}

#[test]
fn gradient_examples() {
    let mut cp = condense(&scalar(1.0, 1.0, 10.0, 10.0, 0.0, 1.0), 1).unwrap();
    cp.cons_f = mat(1, 1, &[1.0]);
    cp.cons_h = mat(1, 1, &[1.0]);
    let g = gradient_f(&cp, &vec(&[1.0]), &vec(&[1.0]), &vec(&[4.0]), 2);
    assert_eq!(g[0], 0.0);

    let (cfg, problem) = water_tank();
    let sd = &problem.subsystems[0];
    let x = &cfg.x0[0];
    let u = DVector::zeros(8);
    let g = gradient_f(&sd.cp, x, &u, &problem.b_eps, 4);
    for r in 0..16 {
        let mut fx = 0.0;
        for c in 0..2 {
            fx += sd.cp.cons_f[(r, c)] * x[c];
        }
        assert!((g[r] - (problem.b_eps[r] / 4.0 - fx)).abs() < 1e-15);
    }
}

#[test]
fn gradient_matches_dual_finite_difference() {
    let (cfg, problem) = water_tank();
    let sets = problem.input_sets(&cfg.x0).unwrap();
    let sd = &problem.subsystems[0];
    let ctx = NodeContext {
        cp: &sd.cp,
        x: &cfg.x0[0],
        feas: &sets[0],
        b_eps: &problem.b_eps,
        m: 4,
        beta: cfg.beta,
        qp: QpSettings::default(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let h = 1e-6;
    let mut checked = 0;
    while checked < 10 {
        let lambda = DVector::from_fn(16, |_, _| rng.random_range(0.05..2.0));
        let u = ctx.inner(&lambda).unwrap();
        let grad = ctx.gradient(&u);
        let mut smooth = true;
        let mut fd = DVector::zeros(16);
        for j in 0..16 {
            let mut lp = lambda.clone();
            lp[j] += h;
            let mut lm = lambda.clone();
            lm[j] -= h;
            let (up, um) = (ctx.inner(&lp).unwrap(), ctx.inner(&lm).unwrap());
            // skip points where the inner active set changes inside the stencil
            if ((&up + &um) * 0.5 - &u).amax() > 1e-9 {
                smooth = false;
                break;
            }
            fd[j] = (ctx.dual_value_at(&lp, &up) - ctx.dual_value_at(&lm, &um)) / (2.0 * h);
        }
        if smooth {
            assert!((&fd - &grad).amax() < 1e-4, "fd {fd} grad {grad}");
            checked += 1;
        }
    }
}

#[test]
fn tightened_bound_blocks() {
    let b = tightened_bound(8, 2, 4, 0.0005);
    assert!((b[0] - 0.998).abs() < 1e-15 && (b[1] - 0.998).abs() < 1e-15);
    assert!((b[14] - 0.984).abs() < 1e-15 && (b[15] - 0.984).abs() < 1e-15);
    for l in 1..8 {
        assert!(b[2 * l] < b[2 * (l - 1)]);
    }
    assert!(tightened_bound(8, 2, 4, 0.0).iter().all(|&v| v == 1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn condensed_cost_equals_simulation(
        x in prop::collection::vec(-2.0f64..2.0, 2),
        u in prop::collection::vec(-1.0f64..1.0, 8),
    ) {
        let s = tank();
        let cp = condense(&s, 8).unwrap();
        let (x, u) = (vec(&x), vec(&u));
        let direct = simulated_cost(&s.a, &s.b, &s.q, &s.r, &cp.p, &x, &u);
        prop_assert!((cp.cost(&x, &u) - direct).abs() <= 1e-9 * direct.abs().max(1e-12));
    }

    #[test]
    fn secant_curvature_within_spectrum(
        x in prop::collection::vec(-2.0f64..2.0, 2),
        u1 in prop::collection::vec(-1.0f64..1.0, 8),
        u2 in prop::collection::vec(-1.0f64..1.0, 8),
    ) {
        let cp = condense(&tank(), 8).unwrap();
        let (x, u1, u2) = (vec(&x), vec(&u1), vec(&u2));
        let du = &u1 - &u2;
        prop_assume!(du.norm() > 1e-6);
        let grad = |u: &DVector<f64>| &cp.cost_w * u * 2.0 + &cp.cost_f * &x * 2.0;
        let curv = (grad(&u1) - grad(&u2)).dot(&du) / du.norm_squared();
        prop_assert!(curv >= cp.mu * (1.0 - 1e-12) && curv <= cp.ell * (1.0 + 1e-12));
    }

    #[test]
    fn dare_fixed_point_on_random_stabilizable_pairs(
        a in prop::collection::vec(-1.2f64..1.2, 4),
        b0 in 0.2f64..2.0,
        b1 in -2.0f64..2.0,
    ) {
        let a = mat(2, 2, &a);
        let b = mat(2, 1, &[b0, b1]);
        let ctrb = nalgebra::Matrix2::new(b[0], (&a * &b)[0], b[1], (&a * &b)[1]);
        prop_assume!(ctrb.determinant().abs() > 1e-2);
        let q = DMatrix::<f64>::identity(2, 2);
        let r = mat(1, 1, &[1.0]);
        let (p, k) = dare_solve(&a, &b, &q, &r).unwrap();
        let scale = p.amax().max(1.0);
        prop_assert!((dare_map(&a, &b, &q, &r, &p) - &p).amax() <= 1e-9 * scale);
        prop_assert!(spectral_radius(&(&a + &b * &k)) < 1.0);
    }
}
