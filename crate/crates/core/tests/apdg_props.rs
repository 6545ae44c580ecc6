mod common;

use apdg_core::apdg::{
    check_termination, eta_bounds, local_update, rate_certificate, CertificateInputs, DualNodeState, InBuffer,
    NodeContext, Thresholds,
};
use apdg_core::dmpc::node_contexts;
use apdg_core::model::{condense, tightened_bound, CondensedProblem};
use apdg_core::polytope::Polytope;
use apdg_core::qp::{centralized_solve, LocalQp, QpSettings};
use common::{scalar, vec, water_tank};
use nalgebra::DVector;
use proptest::prelude::*;

const TH: Thresholds = Thresholds { eps: 0.0005, eps_b: 0.0001, eps_g: 0.0005 };

/// Scalar plant with horizon 1 and coupling `u ≤ b`.
fn scalar_cp(a: f64) -> (CondensedProblem, Polytope) {
    let cp = condense(&scalar(a, 1.0, 10.0, 2.0, 0.0, 1.0), 1).unwrap();
    (cp, Polytope::from_box(&[-2.0], &[2.0]))
}

fn ctx<'a>(cp: &'a CondensedProblem, x: &'a DVector<f64>, feas: &'a Polytope, b: &'a DVector<f64>, m: usize) -> NodeContext<'a> {
    NodeContext { cp, x, feas, b_eps: b, m, beta: 0.05, qp: QpSettings::default() }
}

#[test]
fn single_node_first_update_is_unconstrained_minimiser() {
    let (cp, feas) = scalar_cp(0.9);
    let x = vec(&[1.0]);
    let b = tightened_bound(1, 1, 1, 0.0);
    let c = ctx(&cp, &x, &feas, &b, 1);
    let s0 = DualNodeState::zeros(1);
    let mut buf = InBuffer::default();
    buf.push(s0.payload(0, 1.0));
    let s1 = local_update(&s0, &mut buf, &c).unwrap();
    assert_eq!((s1.w[0], s1.y, s1.lambda[0], s1.z[0]), (0.0, 1.0, 0.0, 0.0));
    let u = (-cp.cost_f[0] * x[0] / cp.cost_w[0]).clamp(-2.0, 2.0);
    assert!((s1.u.unwrap()[0] - u).abs() < 1e-12);
}

#[test]
fn two_node_rounds_match_straight_line_iteration() {
    let (cp, feas) = scalar_cp(1.0);
    let xs = [vec(&[-3.0]), vec(&[-2.0])];
    let b = tightened_bound(1, 1, 2, 0.0);
    let beta = 0.05;
    let ctxs: Vec<NodeContext<'_>> = xs.iter().map(|x| ctx(&cp, x, &feas, &b, 2)).collect();

    // straight-line oracle with complete-graph weights ½
    let (w_c, f_c, h_c) = (cp.cost_w[0], cp.cost_f[0], cp.cons_h[0]);
    let inner = |x: f64, l: f64| (-(2.0 * f_c * x + h_c * l) / (2.0 * w_c)).clamp(-2.0, 2.0);
    let grad = |u: f64| b[0] / 2.0 - h_c * u;
    let (mut z, mut y, mut d, mut gp) = ([0.0f64; 2], [1.0f64; 2], [0.0f64; 2], [0.0f64; 2]);

    let mut states = vec![DualNodeState::zeros(1); 2];
    let mut bufs = vec![InBuffer::new(false); 2];
    for (i, s) in states.iter().enumerate() {
        for buf in bufs.iter_mut() {
            buf.push(s.payload(i, 0.5));
        }
    }
    let mut saw_positive = false;
    for round in 0..40 {
        let w = (z[0] + z[1]) / 2.0;
        let yy = (y[0] + y[1]) / 2.0;
        let dm = (d[0] + d[1]) / 2.0;
        let lam = w.max(0.0) / yy;
        let mut nz = [0.0; 2];
        let mut nd = [0.0; 2];
        for i in 0..2 {
            let g = grad(inner(xs[i][0], lam));
            nz[i] = w - beta * d[i];
            nd[i] = dm + g - gp[i];
            gp[i] = g;
        }
        (z, y, d) = (nz, [yy; 2], nd);

        let next: Vec<DualNodeState> =
            (0..2).map(|i| local_update(&states[i], &mut bufs[i], &ctxs[i]).unwrap()).collect();
        for (i, s) in next.iter().enumerate() {
            assert!((s.lambda[0] - lam).abs() < 1e-12, "round {round} node {i}: {} vs {lam}", s.lambda[0]);
            assert!((s.z[0] - z[i]).abs() < 1e-12 && (s.d[0] - d[i]).abs() < 1e-12);
            assert_eq!(s.alpha, beta);
            for buf in bufs.iter_mut() {
                buf.push(s.payload(i, 0.5));
            }
        }
        saw_positive |= lam > 1e-3;
        states = next;
    }
    assert!(saw_positive, "coupling never became active");
}

#[test]
fn stationary_point_passes_termination() {
    let (cp, feas) = scalar_cp(1.0);
    let b = tightened_bound(1, 1, 1, 0.0);
    for x0 in [0.5, -3.0] {
        let x = vec(&[x0]);
        let c = ctx(&cp, &x, &feas, &b, 1);
        let central = centralized_solve(&[LocalQp { cp: &cp, x: &x, feas: &feas }], &b).unwrap();
        let mut s = DualNodeState::new(central.lambda.clone());
        let u = c.inner(&central.lambda).unwrap();
        s.grad_prev = c.gradient(&u);
        s.u = Some(u);
        assert!(check_termination(&s, &s, &c, &TH), "x0 = {x0}, lambda* = {}", central.lambda);
    }
}

#[test]
fn cold_first_iterate_on_tank_fails_termination() {
    let (cfg, problem) = water_tank();
    let sets = problem.input_sets(&cfg.x0).unwrap();
    let ctxs = node_contexts(&problem, &cfg.x0, &sets, cfg.beta, cfg.qp);
    let s0 = DualNodeState::zeros(16);
    let mut any_far = false;
    for c in &ctxs {
        let mut buf = InBuffer::default();
        buf.push(s0.payload(0, 1.0));
        let s1 = local_update(&s0, &mut buf, c).unwrap();
        let g_next = c.cp.coupling(c.x, s1.u.as_ref().unwrap());
        let step = (g_next - &problem.b_eps / 4.0).amax();
        if step >= TH.eps - TH.eps_b {
            any_far = true;
            assert!(!check_termination(&s0, &s1, c, &TH));
        }
    }
    assert!(any_far);
}

#[test]
fn terminal_states_stop_after_one_update() {
    let (cfg, problem) = water_tank();
    let x: Vec<DVector<f64>> = cfg.x0.iter().map(|x| x * 0.05).collect();
    let sets = problem.input_sets(&x).unwrap();
    let ctxs = node_contexts(&problem, &x, &sets, cfg.beta, cfg.qp);
    let s0 = DualNodeState::zeros(16);
    for (i, c) in ctxs.iter().enumerate() {
        assert!(problem.subsystems[i].terminal.contains(&x[i], 0.0));
        let mut buf = InBuffer::default();
        buf.push(s0.payload(i, 1.0));
        let s1 = local_update(&s0, &mut buf, c).unwrap();
        assert!(check_termination(&s0, &s1, c, &cfg.thresholds), "node {i}");
        let u = s1.u.unwrap();
        let k = &problem.subsystems[i].cp.k;
        assert!(((k * &x[i])[0] - u[0]).abs() < 1e-9);
    }
}

#[test]
fn eta_examples() {
    assert_eq!(eta_bounds(3, 1.0, 2.0, 0.0).0, 5);
    assert_eq!(eta_bounds(4, 0.1, 0.3, 0.0661), (10, 0, 10));
    assert_eq!(eta_bounds(4, 0.1, 0.1, 0.3), (4, 12, 16));
    assert_eq!(eta_bounds(2, 1.0, 1.0, 1.0), (2, 2, 4));
}

#[test]
fn xi_grows_with_delay_and_stays_below_one() {
    let mut last: Option<(u64, f64)> = None;
    for tau in [0.0, 0.5, 1.0, 2.0, 3.0, 5.0] {
        let inp = CertificateInputs::with_defaults(2, 0.5, 1.0, 1.0, tau, 1.0, 2.0, 2, 1e-300);
        let c = rate_certificate(&inp).unwrap().constants().clone();
        assert!(c.xi > 0.0 && c.xi < 1.0 && c.one_minus_xi > 0.0);
        if let Some((b, xi)) = last {
            assert!(c.b_exp >= b && c.xi >= xi);
            if c.b_exp > b {
                assert!(c.xi > xi);
            }
        }
        last = Some((c.b_exp, c.xi));
    }
    assert_eq!(last.unwrap().0, 3 + 2 * 6);
}

/// Formula chain written out directly, without the cancellation-free forms.
struct Naive {
    xi: f64,
    script_l: f64,
    beta2: f64,
    kappa: f64,
}

fn naive_chain(m: f64, abar: f64, tau: f64, theta: f64, lip: f64, nr: f64) -> Naive {
    let eta1 = (m - 1.0) * 1.0 + 1.0;
    let eta = eta1 + m * tau;
    let b = (m - 1.0) * (eta1 + 1.0) + m * (tau + 1.0);
    let xi = (1.0 - abar.powf(b)).powf(1.0 / b);
    let c = 2.0 * (1.0 + abar.powf(-b)) / (1.0 - abar.powf(b));
    let m_hat = m * (eta + 1.0);
    let c1 = m.powf(m * eta) * c * m_hat;
    let pi1 = 2.0 * c1;
    let pi4 = 2.0;
    let c9 = theta / 2.0;
    let c2 = c / xi;
    let c3 = c2 * (m_hat * nr).sqrt();
    let c10 = ((2.0 + pi4) * pi1 * m + m.sqrt() / m_hat) * (m * eta + 1.0) / c9;
    let c11 = pi1 * m * (m * eta + 1.0);
    let c12 = c3 * pi4 * pi4 * (1.0 / xi + 1.0 / xi.powi(2)) * nr.sqrt() * m;
    let c13 = m * pi4 * (c3 * (1.0 + 1.0 / xi) + nr.sqrt());
    let script_l = (c11 + c10 * lip) * (c12 + c13);
    Naive { xi, script_l, beta2: (1.0 - xi).powi(2) / script_l, kappa: theta - c9 }
}

#[test]
fn toy_chain_matches_independent_evaluation() {
    let n = naive_chain(2.0, 0.5, 1.0, 1.0, 2.0, 2.0);
    let inp = |beta| CertificateInputs::with_defaults(2, 0.5, 1.0, 1.0, 1.0, 1.0, 2.0, 2, beta);
    let c = rate_certificate(&inp(1e-300)).unwrap().constants().clone();
    let rel = |a: f64, b: f64| ((a - b) / b).abs();
    assert!(rel(c.xi, n.xi) < 1e-14);
    assert!(rel(c.script_l, n.script_l) < 1e-12);
    assert!(rel(c.beta2, n.beta2) < 1e-12);
    // β₁ is where 1 − κβ meets √(ℒβ) + ξ
    let lhs = 1.0 - n.kappa * c.beta1;
    let rhs = (n.script_l * c.beta1).sqrt() + n.xi;
    assert!((lhs - rhs).abs() < 1e-12);

    let mut probes = vec![0.5 * c.beta1];
    if c.beta1 < c.beta2 {
        probes.push(0.5 * (c.beta1 + c.beta2));
    }
    for beta in probes {
        let cert = rate_certificate(&inp(beta)).unwrap();
        assert!(cert.is_valid());
        let expect = f64::max(1.0 - n.kappa * beta, (n.script_l * beta).sqrt() + n.xi);
        assert!((cert.constants().delta - expect).abs() < 1e-12);
    }
}

#[test]
fn delta_is_continuous_at_beta1() {
    // for M = 1 the gap 1 − δ is far above the tolerance
    for (m, tau) in [(1usize, 0.0), (2, 1.0)] {
        let inp = |beta| CertificateInputs::with_defaults(m, 0.5, 1.0, 1.0, tau, 1.0, 2.0, 2, beta);
        let k = rate_certificate(&inp(1e-300)).unwrap().constants().clone();
        let kappa = 0.5;
        let lower = 1.0 - kappa * k.beta1;
        let upper = (k.script_l * k.beta1).sqrt() + k.xi;
        assert!((lower - upper).abs() < 1e-12, "M={m}: {lower} vs {upper}");
        let at = rate_certificate(&inp(k.beta1)).unwrap().constants().delta;
        let above = rate_certificate(&inp(k.beta1 * (1.0 + 1e-13))).unwrap().constants().delta;
        assert!((at - above).abs() < 1e-12);
        if m == 1 {
            assert!(1.0 - at > 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn multipliers_are_projected(
        zs in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 1), 1..5),
        ys in prop::collection::vec(0.1f64..2.0, 4),
    ) {
        let (cp, feas) = scalar_cp(0.9);
        let x = vec(&[1.0]);
        let b = tightened_bound(1, 1, 1, 0.0);
        let c = ctx(&cp, &x, &feas, &b, 1);
        let mut buf = InBuffer::default();
        for (j, z) in zs.iter().enumerate() {
            let mut s = DualNodeState::zeros(1);
            s.z = vec(z);
            s.y = ys[j];
            buf.push(s.payload(j, 0.5));
        }
        let next = local_update(&DualNodeState::zeros(1), &mut buf, &c).unwrap();
        prop_assert!(next.lambda.iter().all(|&l| l >= 0.0));
        prop_assert!(next.y > 0.0);
    }

    #[test]
    fn certificate_invariants(
        m in 1usize..5,
        abar in 0.3f64..1.0,
        ratio in 1.0f64..3.0,
        tau in 0.0f64..2.0,
        theta in 0.1f64..2.0,
        excess in 1.0f64..10.0,
        nr in 1usize..20,
        frac in 0.01f64..0.99,
    ) {
        let lip = theta * excess;
        let probe = CertificateInputs::with_defaults(m, abar, 1.0, ratio, tau, theta, lip, nr, 1e-300);
        let c = rate_certificate(&probe).unwrap().constants().clone();
        prop_assume!(c.script_l.is_finite() && c.beta2 > 0.0);
        // strict in exact arithmetic; equal in floating point when ℒ ≫ κ(1 − ξ)
        prop_assert!(c.beta1 <= c.beta2);
        let inp = CertificateInputs { beta: c.beta2 * frac, ..probe };
        let cert = rate_certificate(&inp).unwrap();
        prop_assert!(cert.is_valid());
        let k = cert.constants();
        prop_assert!(k.gap > 0.0 && k.gap < k.one_minus_xi, "δ ∈ (ξ, 1)");
        prop_assert!(k.gap < theta / lip, "δ > 1 − ϑ/L");
    }
}
