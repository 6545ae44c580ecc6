//! Per-subsystem state machine of the asynchronous push-sum dual gradient
//! method, its distributed stopping test and the linear-rate certificate.

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{gradient_f, CondensedProblem};
use crate::polytope::Polytope;
use crate::qp::{solve_qp, QpSettings};

/// Everything a node needs besides its own state: the condensed problem at
/// the current plant state and the shared algorithm parameters.
#[derive(Debug, Clone, Copy)]
pub struct NodeContext<'a> {
    pub cp: &'a CondensedProblem,
    pub x: &'a DVector<f64>,
    /// Input polytope `𝒰_T(x)`.
    pub feas: &'a Polytope,
    pub b_eps: &'a DVector<f64>,
    /// Network size `M`.
    pub m: usize,
    pub beta: f64,
    pub qp: QpSettings,
}

impl NodeContext<'_> {
    /// Inner minimizer `u*(λ)`.
    pub fn inner(&self, lambda: &DVector<f64>) -> Result<DVector<f64>> {
        let q = self.cp.inner_linear_term(self.x, lambda);
        solve_qp(&self.cp.cost_w, &q, self.feas.g(), self.feas.h(), &self.qp).map(|s| s.u)
    }

    pub fn gradient(&self, u: &DVector<f64>) -> DVector<f64> {
        gradient_f(self.cp, self.x, u, self.b_eps, self.m)
    }

    /// `fⁱ(λ)` given the inner minimizer `u = u*(λ)`.
    pub fn dual_value_at(&self, lambda: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let lin = -(&self.cp.cons_f * self.x) + self.b_eps / self.m as f64;
        lambda.dot(&lin) - self.cp.cost(self.x, u) - (self.cp.cons_h.transpose() * lambda).dot(u)
    }

    pub fn dual_value(&self, lambda: &DVector<f64>) -> Result<f64> {
        let u = self.inner(lambda)?;
        Ok(self.dual_value_at(lambda, &u))
    }
}

/// Local variables of one node.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DualNodeState {
    pub lambda: DVector<f64>,
    pub z: DVector<f64>,
    pub w: DVector<f64>,
    pub y: f64,
    pub d: DVector<f64>,
    /// `∇fⁱ(λ)` at the most recent `λ`.
    pub grad_prev: DVector<f64>,
    pub u: Option<DVector<f64>>,
    pub s: u64,
    pub l: bool,
    pub k_local: u64,
    /// Step used by the most recent z-update.
    pub alpha: f64,
}

impl DualNodeState {
    /// Cold start with `λ₀ = lambda0`, `z = 0`, `y = 1`, `d = 0`.
    pub fn new(lambda0: DVector<f64>) -> Self {
        let dim = lambda0.len();
        Self {
            lambda: lambda0,
            z: DVector::zeros(dim),
            w: DVector::zeros(dim),
            y: 1.0,
            d: DVector::zeros(dim),
            grad_prev: DVector::zeros(dim),
            u: None,
            s: 0,
            l: false,
            k_local: 0,
            alpha: 0.0,
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self::new(DVector::zeros(dim))
    }

    /// Message this node broadcasts after an update.
    pub fn payload(&self, sender: usize, weight: f64) -> Payload {
        Payload {
            sender,
            weight,
            z: self.z.clone(),
            y: self.y,
            d: self.d.clone(),
            s: self.s,
            l: self.l,
        }
    }
}

/// Content of one message; `weight` is `a_ij = 1/|N_out^sender|`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Payload {
    pub sender: usize,
    pub weight: f64,
    pub z: DVector<f64>,
    pub y: f64,
    pub d: DVector<f64>,
    pub s: u64,
    pub l: bool,
}

/// Messages received since the last read, plus (when `retain_final`) the
/// final messages of terminated neighbours, which are re-read every time.
#[derive(Debug, Clone, PartialEq)]
pub struct InBuffer {
    pub entries: Vec<Payload>,
    pub retain_final: bool,
}

impl Default for InBuffer {
    fn default() -> Self {
        Self { entries: Vec::new(), retain_final: true }
    }
}

impl InBuffer {
    pub fn new(retain_final: bool) -> Self {
        Self { entries: Vec::new(), retain_final }
    }

    pub fn push(&mut self, p: Payload) {
        self.entries.push(p);
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Drops consumed messages; final messages (`l = 1`) persist when
    /// `retain_final` is set.
    pub fn clear_consumed(&mut self) {
        if self.retain_final {
            self.entries.retain(|p| p.l);
        } else {
            self.entries.clear();
        }
    }
}

/// One activation: mixes the buffer, projects, solves the inner problem and
/// updates the tracking variables. Clears consumed buffer entries.
pub fn local_update(
    state: &DualNodeState,
    buffer: &mut InBuffer,
    ctx: &NodeContext<'_>,
) -> Result<DualNodeState> {
    if state.l {
        return Err(Error::Frozen(state.k_local as usize));
    }
    let dim = state.lambda.len();
    let mut w = DVector::zeros(dim);
    let mut y = 0.0;
    let mut d_mix = DVector::zeros(dim);
    let mut s_tilde = 0;
    for p in &buffer.entries {
        w.axpy(p.weight, &p.z, 1.0);
        y += p.weight * p.y;
        d_mix.axpy(p.weight, &p.d, 1.0);
        s_tilde = s_tilde.max(p.s);
    }
    buffer.clear_consumed();
    if y <= 0.0 {
        return Err(Error::Dimension("push-sum weight y vanished; buffer was empty".into()));
    }

    let lambda = w.map(|v| v.max(0.0)) / y;
    let u = ctx.inner(&lambda)?;
    let grad = ctx.gradient(&u);
    let alpha = (s_tilde.saturating_sub(state.s) + 1) as f64 * ctx.beta;
    let z = &w - &state.d * alpha;
    let d = d_mix + &grad - &state.grad_prev;

    Ok(DualNodeState {
        lambda,
        z,
        w,
        y,
        d,
        grad_prev: grad,
        u: Some(u),
        // counter follows the furthest-ahead neighbour heard from
        s: state.s.max(s_tilde) + 1,
        l: false,
        k_local: state.k_local + 1,
        alpha,
    })
}

/// Stopping thresholds `(ε, ε_b, ε_g)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct Thresholds {
    pub eps: f64,
    pub eps_b: f64,
    pub eps_g: f64,
}

/// Distributed stopping test over two consecutive updates of one node.
///
/// The previous coupling value is recovered from the stored gradient as
/// `b/M − ∇fⁱ(λ_prev)`, which also covers the cold-start state.
pub fn check_termination(
    prev: &DualNodeState,
    next: &DualNodeState,
    ctx: &NodeContext<'_>,
    th: &Thresholds,
) -> bool {
    let Some(u_next) = next.u.as_ref() else {
        return false;
    };
    let share = ctx.b_eps / ctx.m as f64;
    let g_next = ctx.cp.coupling(ctx.x, u_next);
    let g_prev = &share - &prev.grad_prev;
    let step_ok = (g_next - g_prev).iter().all(|&v| v < th.eps - th.eps_b);

    let gap = ctx.cp.cost(ctx.x, u_next)
        + prev.grad_prev.norm() * (&next.lambda - &prev.lambda).norm()
        + ctx.dual_value_at(&next.lambda, u_next);
    step_ok && gap <= th.eps_g / ctx.m as f64
}

/// `a/b` within round-off of an integer counts as that integer, so that
/// `0.3/0.1` floors to 3.
fn snap(a: f64, b: f64) -> f64 {
    let r = a / b;
    let n = r.round();
    if (r - n).abs() <= 1e-9 * n.max(1.0) {
        n
    } else {
        r
    }
}

pub fn ratio_floor(a: f64, b: f64) -> u64 {
    snap(a, b).floor() as u64
}

pub fn ratio_ceil(a: f64, b: f64) -> u64 {
    snap(a, b).ceil() as u64
}

/// Activation-window bounds `(η₁, η₂, η)`; `tau` is in the same unit as the
/// activation intervals.
pub fn eta_bounds(m: usize, tau_lo: f64, tau_hi: f64, tau: f64) -> (u64, u64, u64) {
    let eta1 = (m as u64 - 1) * ratio_floor(tau_hi, tau_lo) + 1;
    let eta2 = m as u64 * ratio_floor(tau, tau_lo);
    (eta1, eta2, eta1 + eta2)
}

/// Inputs of the rate certificate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CertificateInputs {
    pub m: usize,
    pub abar: f64,
    pub tau_lo: f64,
    pub tau_hi: f64,
    pub tau_delay: f64,
    pub theta: f64,
    pub lip: f64,
    pub n_rho: usize,
    pub beta: f64,
    pub c9: f64,
    pub pi4: f64,
}

impl CertificateInputs {
    /// Uses the defaults `c₉ = ϑ/2`, `π₄ = 2`.
    #[allow(clippy::too_many_arguments)]
    pub fn with_defaults(
        m: usize,
        abar: f64,
        tau_lo: f64,
        tau_hi: f64,
        tau_delay: f64,
        theta: f64,
        lip: f64,
        n_rho: usize,
        beta: f64,
    ) -> Self {
        Self { m, abar, tau_lo, tau_hi, tau_delay, theta, lip, n_rho, beta, c9: theta / 2.0, pi4: 2.0 }
    }
}

/// Constant chain of the linear-rate bound.
///
/// `delta` is close to 1 in practice, so `gap = 1 − δ` and `one_minus_xi`
/// are computed without cancellation and should be preferred for checks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateCertificate {
    pub eta1: u64,
    pub eta2: u64,
    pub eta: u64,
    pub tau_ticks: u64,
    pub b_exp: u64,
    pub xi: f64,
    pub one_minus_xi: f64,
    pub c: f64,
    pub m_hat: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
    pub c6: f64,
    pub c7: f64,
    pub c8: f64,
    pub c9: f64,
    pub c10: f64,
    pub c11: f64,
    pub c12: f64,
    pub c13: f64,
    pub c14: f64,
    pub pi1: f64,
    pub pi2: f64,
    pub pi3: f64,
    pub pi4: f64,
    pub script_l: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub delta: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Certificate {
    Valid(RateCertificate),
    /// The step size or constants fall outside the proven range; the partial
    /// chain is still reported.
    NoCertificate { reason: String, partial: RateCertificate },
}

impl Certificate {
    pub fn constants(&self) -> &RateCertificate {
        match self {
            Certificate::Valid(c) => c,
            Certificate::NoCertificate { partial, .. } => partial,
        }
    }

    pub fn is_valid(&self) -> bool {
        matches!(self, Certificate::Valid(_))
    }
}

/// Evaluates the rate bound. Errors only on malformed inputs; an
/// out-of-range step or `ϑ = 0` yields [`Certificate::NoCertificate`].
pub fn rate_certificate(inp: &CertificateInputs) -> Result<Certificate> {
    let bad = |msg: &str| Err(Error::ConfigInvalid(format!("rate_certificate: {msg}")));
    if inp.m == 0 {
        return bad("M must be positive");
    }
    if !(inp.abar > 0.0 && inp.abar <= 1.0) {
        return bad("abar must lie in (0, 1]");
    }
    if !(inp.tau_lo > 0.0 && inp.tau_hi >= inp.tau_lo) {
        return bad("need 0 < tau_lo <= tau_hi");
    }
    if !(inp.tau_delay >= 0.0) {
        return bad("tau_delay must be nonnegative");
    }
    if !(inp.pi4 > 1.0) {
        return bad("pi4 must exceed 1");
    }
    if !(inp.beta > 0.0) {
        return bad("beta must be positive");
    }

    let mf = inp.m as f64;
    let (eta1, eta2, eta) = eta_bounds(inp.m, inp.tau_lo, inp.tau_hi, inp.tau_delay);
    let tau_ticks = ratio_ceil(inp.tau_delay, inp.tau_lo);
    let b_exp = (inp.m as u64 - 1) * (eta1 + 1) + inp.m as u64 * (tau_ticks + 1);
    let bf = b_exp as f64;
    let a_b = inp.abar.powf(bf);
    let log_xi = (-a_b).ln_1p() / bf;
    let xi = log_xi.exp();
    let one_minus_xi = -log_xi.exp_m1();
    let c = 2.0 * (1.0 + inp.abar.powf(-bf)) / (1.0 - a_b);

    let m_eta1 = mf * eta as f64 + 1.0;
    let m_hat = mf * (eta as f64 + 1.0);
    let nr = inp.n_rho as f64;
    let (beta, lip, theta, pi4, c9) = (inp.beta, inp.lip, inp.theta, inp.pi4, inp.c9);

    let c1 = mf.powf(mf * eta as f64) * c * m_hat;
    let pi1 = 2.0 * c1;
    let pi2 = pi1 * xi;
    let pi3 = pi1 * mf * m_eta1 * beta;
    let c2 = c / xi;
    let c3 = c2 * (m_hat * nr).sqrt();
    let c4 = c3 * pi4 * (1.0 + 1.0 / xi) * lip * beta;
    let c5 = nr.sqrt() * mf * pi4 * lip * beta;
    let c6 = mf.sqrt() / m_hat * m_eta1 * beta;
    let c7 = 2.0 + pi4 - beta * lip;
    let c8 = 1.0 - beta * lip;
    let c10 = ((2.0 + pi4) * pi1 * mf + mf.sqrt() / m_hat) * m_eta1 / c9;
    let c11 = pi1 * mf * m_eta1;
    let c12 = c3 * pi4 * pi4 * (1.0 / xi + 1.0 / (xi * xi)) * nr.sqrt() * mf;
    let c13 = mf * pi4 * (c3 * (1.0 + 1.0 / xi) + nr.sqrt());
    let c14 = 1.0 - beta * theta;
    let script_l = (c11 + c10 * lip) * (c12 + c13);
    let beta2 = one_minus_xi * one_minus_xi / script_l;
    let kappa = theta - c9;
    // β₁ = β₂·(2/(1 + √(1 + 4κ(1−ξ)/ℒ)))², so β₁ ≤ β₂ survives rounding
    let shrink = 2.0 / (1.0 + (1.0 + 4.0 * kappa * one_minus_xi / script_l).sqrt());
    let beta1 = beta2 * shrink * shrink;
    let (delta, gap) = if beta <= beta1 {
        (1.0 - kappa * beta, kappa * beta)
    } else {
        let root = (script_l * beta).sqrt();
        (root + xi, one_minus_xi - root)
    };

    let cert = RateCertificate {
        eta1,
        eta2,
        eta,
        tau_ticks,
        b_exp,
        xi,
        one_minus_xi,
        c,
        m_hat,
        c1,
        c2,
        c3,
        c4,
        c5,
        c6,
        c7,
        c8,
        c9,
        c10,
        c11,
        c12,
        c13,
        c14,
        pi1,
        pi2,
        pi3,
        pi4,
        script_l,
        beta1,
        beta2,
        delta,
        gap,
    };
    let reason = if !(theta > 0.0) {
        Some("dual is not strongly convex (theta = 0)".to_string())
    } else if !(c9 > 0.0 && c9 < theta) {
        Some(format!("c9 = {c9} is outside (0, theta = {theta})"))
    } else if !script_l.is_finite() || !(one_minus_xi > 0.0) {
        Some("constant chain overflowed".to_string())
    } else if beta >= beta2 {
        Some(format!("beta = {beta:e} is not below beta2 = {beta2:e}"))
    } else {
        None
    };
    Ok(match reason {
        Some(reason) => Certificate::NoCertificate { reason, partial: cert },
        None => Certificate::Valid(cert),
    })
}
