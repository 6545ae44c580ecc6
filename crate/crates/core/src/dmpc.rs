//! Problem assembly and the receding-horizon loop: at every step each
//! subsystem runs APDG to distributed termination over the simulated
//! network and applies the head of its input sequence.

use std::fmt::Write as _;
use std::time::Instant;

use log::{debug, info};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::apdg::{DualNodeState, NodeContext, Thresholds};
use crate::error::{Error, Result};
use crate::model::{condense, tightened_bound, CondensedProblem, LtiSubsystem};
use crate::netsim::{run_apdg, AfterTermination, Digraph, Mode, Schedule, SimConfig, SimOutput, StopRule};
use crate::polytope::{terminal_set, Polytope};
use crate::qp::{centralized_solve, CentralSolution, LocalQp, QpSettings};

/// Slack used when deciding whether constant rows of `𝒰_T(x)` hold.
const ROW_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct DmpcConfig {
    pub subsystems: Vec<LtiSubsystem>,
    pub horizon: usize,
    pub gamma: f64,
    pub thresholds: Thresholds,
    pub graph: Digraph,
    pub schedule: Schedule,
    pub mode: Mode,
    pub beta: f64,
    pub seed: u64,
    pub t_sim: usize,
    pub x0: Vec<DVector<f64>>,
    /// Start each step's dual iteration from the previous step's `λ`.
    pub warm_start: bool,
    pub max_local_iterations: u64,
    pub after_termination: AfterTermination,
    pub qp: QpSettings,
}

impl DmpcConfig {
    pub fn m(&self) -> usize {
        self.subsystems.len()
    }

    /// `σ = 1/M − (N+1)γ`.
    pub fn sigma(&self) -> f64 {
        1.0 / self.m() as f64 - (self.horizon + 1) as f64 * self.gamma
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.m();
        let bad = |msg: String| Err(Error::ConfigInvalid(msg));
        if m == 0 {
            return bad("at least one subsystem is required".into());
        }
        if self.graph.len() != m {
            return bad(format!("graph has {} nodes but there are {m} subsystems", self.graph.len()));
        }
        if self.x0.len() != m {
            return bad(format!("x0 has {} blocks but there are {m} subsystems", self.x0.len()));
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        let rho = self.subsystems[0].rho();
        for (i, s) in self.subsystems.iter().enumerate() {
            s.validate().map_err(|e| Error::ConfigInvalid(format!("subsystem {}: {e}", i + 1)))?;
            if s.rho() != rho {
                return bad(format!("subsystem {}: coupling has {} rows, expected {rho}", i + 1, s.rho()));
            }
            if self.x0[i].len() != s.n() {
                return bad(format!("x0 block {} has length {}, expected {}", i + 1, self.x0[i].len(), s.n()));
            }
        }
        let gmax = 1.0 / (m * (self.horizon + 1)) as f64;
        if !(self.gamma > 0.0 && self.gamma < gmax) {
            return bad(format!("gamma = {} must lie in (0, {gmax})", self.gamma));
        }
        let th = &self.thresholds;
        if !(th.eps > 0.0 && th.eps <= self.gamma) {
            return bad(format!("eps = {} must lie in (0, gamma]", th.eps));
        }
        if !(th.eps_b >= 0.0 && th.eps_g > 0.0) {
            return bad("eps_b must be nonnegative and eps_g positive".into());
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive".into());
        }
        if self.max_local_iterations == 0 {
            return bad("max_local_iterations must be positive".into());
        }
        self.schedule.validate(m)
    }
}

/// Precomputed data of one subsystem.
#[derive(Debug, Clone, PartialEq)]
pub struct SubsystemData {
    pub sys: LtiSubsystem,
    pub cp: CondensedProblem,
    pub terminal: Polytope,
}

impl SubsystemData {
    /// Input polytope `𝒰_T(x)`: predicted states in `X` for steps `1..N−1`,
    /// the terminal set at step `N`, and every input in `U`.
    pub fn input_set(&self, x: &DVector<f64>) -> Result<Polytope> {
        let (n, m, big_n) = (self.cp.n, self.cp.m, self.cp.horizon);
        if !self.sys.x_set.contains(x, ROW_TOL) {
            return Err(Error::QpInfeasible);
        }
        let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
        let push_state_rows = |set: &Polytope, l: usize, rows: &mut Vec<(DVector<f64>, f64)>| -> Result<()> {
            let a_l = self.cp.abar.rows(l * n, n);
            let b_l = self.cp.bbar.rows(l * n, n);
            let g = set.g() * b_l;
            let h = set.h() - set.g() * (a_l * x);
            for r in 0..g.nrows() {
                if g.row(r).amax() == 0.0 {
                    if h[r] < -ROW_TOL {
                        return Err(Error::QpInfeasible);
                    }
                    continue;
                }
                rows.push((g.row(r).transpose(), h[r]));
            }
            Ok(())
        };
        for l in 1..big_n {
            push_state_rows(&self.sys.x_set, l, &mut rows)?;
        }
        push_state_rows(&self.terminal, big_n, &mut rows)?;
        let gu = self.sys.u_set.g();
        for l in 0..big_n {
            for r in 0..gu.nrows() {
                let mut row = DVector::zeros(big_n * m);
                row.rows_mut(l * m, m).copy_from(&gu.row(r).transpose());
                rows.push((row, self.sys.u_set.h()[r]));
            }
        }
        let g = DMatrix::from_fn(rows.len(), big_n * m, |i, j| rows[i].0[j]);
        let h = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
        Polytope::new(g, h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DmpcProblem {
    pub subsystems: Vec<SubsystemData>,
    pub b_eps: DVector<f64>,
    pub sigma: f64,
}

impl DmpcProblem {
    pub fn m(&self) -> usize {
        self.subsystems.len()
    }

    pub fn input_sets(&self, x: &[DVector<f64>]) -> Result<Vec<Polytope>> {
        self.subsystems.iter().zip(x).map(|(s, xi)| s.input_set(xi)).collect()
    }

    /// Centralized optimum at `x`, or `InitialStateInfeasible`.
    pub fn central(&self, x: &[DVector<f64>]) -> Result<CentralSolution> {
        let sets = self.input_sets(x).map_err(infeasible)?;
        let locals: Vec<LocalQp<'_>> = self
            .subsystems
            .iter()
            .zip(x)
            .zip(&sets)
            .map(|((s, xi), f)| LocalQp { cp: &s.cp, x: xi, feas: f })
            .collect();
        centralized_solve(&locals, &self.b_eps).map_err(infeasible)
    }
}

fn infeasible(e: Error) -> Error {
    match e {
        Error::QpInfeasible => Error::InitialStateInfeasible,
        other => other,
    }
}

pub fn build_problem(cfg: &DmpcConfig) -> Result<DmpcProblem> {
    cfg.validate()?;
    let sigma = cfg.sigma();
    let mut subsystems = Vec::with_capacity(cfg.m());
    for sys in &cfg.subsystems {
        let cp = condense(sys, cfg.horizon)?;
        let terminal = terminal_set(sys, &cp.k, sigma)?;
        subsystems.push(SubsystemData { sys: sys.clone(), cp, terminal });
    }
    let rho = cfg.subsystems[0].rho();
    let b_eps = tightened_bound(cfg.horizon, rho, cfg.m(), cfg.thresholds.eps);
    Ok(DmpcProblem { subsystems, b_eps, sigma })
}

/// One subsystem's result at one closed-loop step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeStep {
    pub x: DVector<f64>,
    /// Full horizon sequence returned by the dual iteration.
    pub u_seq: DVector<f64>,
    pub iterations: u64,
    pub lambda: DVector<f64>,
    pub cost: f64,
    pub in_terminal: bool,
}

impl NodeStep {
    pub fn applied(&self, m: usize) -> DVector<f64> {
        self.u_seq.rows(0, m).into_owned()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub t: usize,
    pub nodes: Vec<NodeStep>,
    /// Simulated seconds from the start of the step to the last termination.
    pub solve_time: f64,
    pub wall_seconds: f64,
    /// `Σᵢ (Cgⁱ xⁱ + Dgⁱ uⁱ)` with the applied inputs.
    pub global_constraint: DVector<f64>,
    /// `Σᵢ 𝔤ⁱ(xⁱ, uⁱ)` over the whole horizon.
    pub coupling: DVector<f64>,
    pub central_cost: Option<f64>,
    pub central_lambda: Option<DVector<f64>>,
}

impl StepRecord {
    pub fn total_cost(&self) -> f64 {
        self.nodes.iter().map(|n| n.cost).sum()
    }

    pub fn state_norm_sq(&self) -> f64 {
        self.nodes.iter().map(|n| n.x.norm_squared()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MpcTrace {
    pub steps: Vec<StepRecord>,
    pub final_x: Vec<DVector<f64>>,
}

/// Per-node contexts at plant state `x` with input sets `sets`.
pub fn node_contexts<'a>(
    problem: &'a DmpcProblem,
    x: &'a [DVector<f64>],
    sets: &'a [Polytope],
    beta: f64,
    qp: QpSettings,
) -> Vec<NodeContext<'a>> {
    problem
        .subsystems
        .iter()
        .zip(x)
        .zip(sets)
        .map(|((s, xi), f)| NodeContext { cp: &s.cp, x: xi, feas: f, b_eps: &problem.b_eps, m: problem.m(), beta, qp })
        .collect()
}

pub fn sim_config(cfg: &DmpcConfig, mode: Mode, stop: StopRule) -> SimConfig {
    SimConfig {
        schedule: cfg.schedule.clone(),
        mode,
        seed: cfg.seed,
        stop,
        thresholds: cfg.thresholds,
        after_termination: cfg.after_termination,
        record_trace: false,
    }
}

/// Runs the dual iteration at plant state `x` and returns the raw simulation
/// output alongside the input sets used.
pub fn solve_step(
    problem: &DmpcProblem,
    cfg: &DmpcConfig,
    x: &[DVector<f64>],
    init: Vec<DualNodeState>,
    mode: Mode,
    stop: StopRule,
) -> Result<(SimOutput, Vec<Polytope>)> {
    let sets = problem.input_sets(x)?;
    let contexts = node_contexts(problem, x, &sets, cfg.beta, cfg.qp);
    let out = run_apdg(&cfg.graph, &contexts, init, &sim_config(cfg, mode, stop))?;
    Ok((out, sets))
}

pub fn cold_start(problem: &DmpcProblem) -> Vec<DualNodeState> {
    problem.subsystems.iter().map(|_| DualNodeState::zeros(problem.b_eps.len())).collect()
}

pub fn closed_loop_run(cfg: &DmpcConfig) -> Result<MpcTrace> {
    let problem = build_problem(cfg)?;
    closed_loop_with(&problem, cfg)
}

/// Closed loop on a prebuilt problem.
pub fn closed_loop_with(problem: &DmpcProblem, cfg: &DmpcConfig) -> Result<MpcTrace> {
    let mut x = cfg.x0.clone();
    problem.central(&x)?;
    let stop = StopRule { check_termination: true, max_local_iterations: cfg.max_local_iterations };
    let mut steps = Vec::with_capacity(cfg.t_sim);
    let mut warm: Option<Vec<DVector<f64>>> = None;

    for t in 0..cfg.t_sim {
        let clock = Instant::now();
        let init = match (&warm, cfg.warm_start) {
            (Some(l), true) => l.iter().map(|v| DualNodeState::new(v.clone())).collect(),
            _ => cold_start(problem),
        };
        let (out, _) = solve_step(problem, cfg, &x, init, cfg.mode, stop)?;
        let wall_seconds = clock.elapsed().as_secs_f64();
        let central = problem.central(&x).ok();

        let rho = problem.subsystems[0].sys.rho();
        let mut global_constraint = DVector::zeros(rho);
        let mut coupling = DVector::zeros(problem.b_eps.len());
        let mut nodes = Vec::with_capacity(problem.m());
        for ((sd, st), xi) in problem.subsystems.iter().zip(&out.states).zip(&x) {
            let u_seq = st.u.clone().expect("terminated node has solved at least once");
            let u0 = u_seq.rows(0, sd.cp.m).into_owned();
            global_constraint += &sd.sys.cg * xi + &sd.sys.dg * &u0;
            coupling += sd.cp.coupling(xi, &u_seq);
            nodes.push(NodeStep {
                x: xi.clone(),
                cost: sd.cp.cost(xi, &u_seq),
                in_terminal: sd.terminal.contains(xi, ROW_TOL),
                iterations: st.k_local,
                lambda: st.lambda.clone(),
                u_seq,
            });
        }
        debug!(
            "t={t} iterations={:?} solve_time={:.4}s",
            nodes.iter().map(|n| n.iterations).collect::<Vec<_>>(),
            out.finish_time
        );
        let next: Vec<DVector<f64>> = problem
            .subsystems
            .iter()
            .zip(&nodes)
            .map(|(sd, n)| sd.sys.step(&n.x, &n.applied(sd.cp.m)))
            .collect();
        warm = Some(out.states.iter().map(|s| s.lambda.clone()).collect());
        steps.push(StepRecord {
            t,
            nodes,
            solve_time: out.finish_time,
            wall_seconds,
            global_constraint,
            coupling,
            central_cost: central.as_ref().map(|c| c.j_star),
            central_lambda: central.map(|c| c.lambda),
        });
        x = next;
    }
    info!("closed loop finished after {} steps", steps.len());
    Ok(MpcTrace { steps, final_x: x })
}

/// Shifted candidate `(ū⁺, x̄⁺)` from a horizon sequence and its predicted
/// trajectory `col(x₀,…,x_N)`: drop the head, append `K x_N` and `A_K x_N`.
pub fn candidate_shift(
    u_prev: &DVector<f64>,
    x_traj: &DVector<f64>,
    k: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let (m, n) = k.shape();
    let big_n = u_prev.len() / m;
    let x_n = x_traj.rows(big_n * n, n).into_owned();
    let u_tail = k * &x_n;
    let mut u_plus = DVector::zeros(big_n * m);
    u_plus.rows_mut(0, (big_n - 1) * m).copy_from(&u_prev.rows(m, (big_n - 1) * m));
    u_plus.rows_mut((big_n - 1) * m, m).copy_from(&u_tail);
    let mut x_plus = DVector::zeros((big_n + 1) * n);
    x_plus.rows_mut(0, big_n * n).copy_from(&x_traj.rows(n, big_n * n));
    x_plus.rows_mut(big_n * n, n).copy_from(&((a + b * k) * x_n));
    (u_plus, x_plus)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum ViolationKind {
    /// `Σ 𝔤 − b(ε) ≺ εM·1` fails for the applied solution.
    TightenedCoupling,
    /// `Σ (Cg x + Dg u) ⪯ 1` fails for the applied input.
    GlobalConstraint,
    /// Shifted candidate leaves some `𝒰_T(x⁺)`.
    CandidateLocal,
    /// Shifted candidate breaks `Σ 𝔤 ≺ b(ε)`.
    CandidateCoupling,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub t: usize,
    pub kind: ViolationKind,
    /// Largest amount by which the bound is exceeded.
    pub amount: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct FeasibilityReport {
    pub steps_checked: usize,
    pub violations: Vec<Violation>,
    /// Smallest slack `εM − max(Σ 𝔤 − b(ε))` seen; nonpositive flags slack loss.
    pub min_margin: f64,
}

impl FeasibilityReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks the applied solutions and the shifted candidates of a trace.
pub fn verify_feasibility(trace: &MpcTrace, problem: &DmpcProblem, eps: f64, tol: f64) -> FeasibilityReport {
    let m = problem.m();
    let margin = eps * m as f64;
    let mut report = FeasibilityReport { min_margin: f64::INFINITY, ..Default::default() };
    for step in &trace.steps {
        report.steps_checked += 1;
        let excess = (&step.coupling - &problem.b_eps).max();
        report.min_margin = report.min_margin.min(margin - excess);
        if excess >= margin {
            report.violations.push(Violation { t: step.t, kind: ViolationKind::TightenedCoupling, amount: excess - margin });
        }
        let g_excess = step.global_constraint.max() - 1.0;
        if g_excess > tol {
            report.violations.push(Violation { t: step.t, kind: ViolationKind::GlobalConstraint, amount: g_excess });
        }

        let mut cand_coupling = DVector::zeros(problem.b_eps.len());
        let mut local_excess: f64 = 0.0;
        let mut local_ok = true;
        for (sd, node) in problem.subsystems.iter().zip(&step.nodes) {
            let traj = sd.cp.predict(&node.x, &node.u_seq);
            let (u_plus, x_plus) = candidate_shift(&node.u_seq, &traj, &sd.cp.k, &sd.sys.a, &sd.sys.b);
            let x1 = x_plus.rows(0, sd.cp.n).into_owned();
            cand_coupling += sd.cp.coupling(&x1, &u_plus);
            match sd.input_set(&x1) {
                Ok(set) => local_excess = local_excess.max(set.max_violation(&u_plus)),
                Err(_) => local_ok = false,
            }
        }
        if !local_ok || local_excess > tol {
            report.violations.push(Violation {
                t: step.t,
                kind: ViolationKind::CandidateLocal,
                amount: if local_ok { local_excess } else { f64::INFINITY },
            });
        }
        let c_excess = (&cand_coupling - &problem.b_eps).max();
        if c_excess >= tol {
            report.violations.push(Violation { t: step.t, kind: ViolationKind::CandidateCoupling, amount: c_excess });
        }
    }
    report
}

/// Closed-loop trace as CSV: `t, x*, u*, g*, iters*, solve_seconds`.
pub fn trace_csv(trace: &MpcTrace, problem: &DmpcProblem) -> String {
    let mut header = vec!["t".to_string()];
    for (i, sd) in problem.subsystems.iter().enumerate() {
        for j in 0..sd.cp.n {
            header.push(format!("x{}_{}", i + 1, j + 1));
        }
    }
    for (i, sd) in problem.subsystems.iter().enumerate() {
        for j in 0..sd.cp.m {
            header.push(format!("u{}_{}", i + 1, j + 1));
        }
    }
    let rho = problem.subsystems.first().map_or(0, |s| s.sys.rho());
    for r in 0..rho {
        header.push(format!("g{}", r + 1));
    }
    for i in 0..problem.m() {
        header.push(format!("iters{}", i + 1));
    }
    header.push("solve_seconds".into());
    let mut out = header.join(",");
    out.push('\n');
    for step in &trace.steps {
        let mut cells = vec![step.t.to_string()];
        cells.extend(step.nodes.iter().flat_map(|n| n.x.iter().map(|v| fmt17(*v)).collect::<Vec<_>>()));
        for (sd, n) in problem.subsystems.iter().zip(&step.nodes) {
            cells.extend(n.applied(sd.cp.m).iter().map(|v| fmt17(*v)));
        }
        cells.extend(step.global_constraint.iter().map(|v| fmt17(*v)));
        cells.extend(step.nodes.iter().map(|n| n.iterations.to_string()));
        cells.push(fmt17(step.solve_time));
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}

/// 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}
