use std::fmt::Write as _;
use std::path::Path;

use anyhow::Result;
use apdg_core::apdg::{rate_certificate, Certificate, CertificateInputs, RateCertificate};
use apdg_core::config::FileConfig;
use apdg_core::dmpc::{
    closed_loop_with, cold_start, fmt17, node_contexts, sim_config, trace_csv, DmpcConfig, DmpcProblem, MpcTrace,
};
use apdg_core::model::aggregate_constants;
use apdg_core::netsim::{self, run_apdg, validate_graph, Mode, StopRule};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::write_file;

const PLOT_SCRIPT: &str = include_str!("../assets/plot.py");

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn fmt_matrix(m: &DMatrix<f64>) -> String {
    m.row_iter()
        .map(|r| r.iter().map(|v| format!("{v:>10.4}")).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join("\n    ")
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

#[derive(Serialize)]
struct CondensedInfo {
    p: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    input_dim: usize,
    coupling_rows: usize,
    mu: f64,
    ell: f64,
    theta: f64,
    lip: f64,
}

#[derive(Serialize)]
struct CondenseReport {
    /// Normalized experiment; feeding it back to the reader reproduces the run.
    config: FileConfig,
    subsystems: Vec<CondensedInfo>,
}

pub fn condense(cfg: &DmpcConfig, problem: &DmpcProblem, json: bool) -> Result<()> {
    let infos: Vec<CondensedInfo> = problem
        .subsystems
        .iter()
        .map(|s| CondensedInfo {
            p: rows(&s.cp.p),
            k: rows(&s.cp.k),
            input_dim: s.cp.input_dim(),
            coupling_rows: s.cp.dual_dim(),
            mu: s.cp.mu,
            ell: s.cp.ell,
            theta: s.cp.theta,
            lip: s.cp.lip,
        })
        .collect();
    if json {
        let config = FileConfig::from_dmpc(cfg).normalized()?;
        return print_json(&CondenseReport { config, subsystems: infos });
    }
    println!("horizon N = {}, M = {} subsystems", cfg.horizon, cfg.m());
    for (i, (s, info)) in problem.subsystems.iter().zip(&infos).enumerate() {
        println!("subsystem {}", i + 1);
        println!("  P = {}", fmt_matrix(&s.cp.p));
        println!("  K = {}", fmt_matrix(&s.cp.k));
        println!("  input dimension N·m = {}, coupling rows N·ρ = {}", info.input_dim, info.coupling_rows);
        println!("  μ = {:.6e}  l = {:.6e}  ϑ = {:.6e}  L = {:.6e}", info.mu, info.ell, info.theta, info.lip);
    }
    Ok(())
}

#[derive(Serialize)]
struct TerminalInfo {
    rows: usize,
    g: Vec<Vec<f64>>,
    h: Vec<f64>,
}

#[derive(Serialize)]
struct TerminalReport {
    sigma: f64,
    subsystems: Vec<TerminalInfo>,
}

pub fn terminal_set(problem: &DmpcProblem, json: bool) -> Result<()> {
    let report = TerminalReport {
        sigma: problem.sigma,
        subsystems: problem
            .subsystems
            .iter()
            .map(|s| TerminalInfo {
                rows: s.terminal.n_rows(),
                g: rows(s.terminal.g()),
                h: s.terminal.h().iter().copied().collect(),
            })
            .collect(),
    };
    if json {
        return print_json(&report);
    }
    println!("σ = {:.6}", report.sigma);
    for (i, t) in report.subsystems.iter().enumerate() {
        println!("subsystem {}: {} halfspaces  g·x ≤ h", i + 1, t.rows);
        for (g, h) in t.g.iter().zip(&t.h) {
            let g: Vec<String> = g.iter().map(|v| format!("{v:>10.6}")).collect();
            println!("  [{}] ≤ {h:.6}", g.join(" "));
        }
    }
    Ok(())
}

fn certificate_for(cfg: &DmpcConfig, problem: &DmpcProblem) -> Result<(CertificateInputs, Certificate)> {
    let abar = validate_graph(&cfg.graph)?.abar;
    let (lo, hi) = cfg.schedule.effective_bounds();
    let cps: Vec<_> = problem.subsystems.iter().map(|s| s.cp.clone()).collect();
    let agg = aggregate_constants(&cps);
    let inp = CertificateInputs::with_defaults(
        cfg.m(),
        abar,
        lo,
        hi,
        cfg.schedule.tau_delay,
        agg.theta,
        agg.lip,
        problem.b_eps.len(),
        cfg.beta,
    );
    let cert = rate_certificate(&inp)?;
    Ok((inp, cert))
}

#[derive(Serialize)]
struct CertificateReport<'a> {
    valid: bool,
    reason: Option<&'a str>,
    inputs: CertificateInputs,
    constants: &'a RateCertificate,
}

impl<'a> CertificateReport<'a> {
    fn new(inputs: CertificateInputs, cert: &'a Certificate) -> Self {
        let reason = match cert {
            Certificate::Valid(_) => None,
            Certificate::NoCertificate { reason, .. } => Some(reason.as_str()),
        };
        Self { valid: cert.is_valid(), reason, inputs, constants: cert.constants() }
    }

    fn print(&self) {
        match self.reason {
            None => println!("certificate: valid, δ = {:.12} (1 − δ = {:.3e})", self.constants.delta, self.constants.gap),
            Some(r) => println!("certificate: none ({r})"),
        }
        let c = self.constants;
        println!("  η₁ = {}, η₂ = {}, η = {}, τ = {} ticks, B = {}", c.eta1, c.eta2, c.eta, c.tau_ticks, c.b_exp);
        println!("  ξ = {:.6e}, 1 − ξ = {:.6e}, ℒ = {:.6e}", c.xi, c.one_minus_xi, c.script_l);
        println!("  β₁ = {:.6e}, β₂ = {:.6e}, β = {}", c.beta1, c.beta2, self.inputs.beta);
    }
}

pub fn certificate(cfg: &DmpcConfig, problem: &DmpcProblem, json: bool) -> Result<()> {
    let (inp, cert) = certificate_for(cfg, problem)?;
    let report = CertificateReport::new(inp, &cert);
    if json {
        return print_json(&report);
    }
    report.print();
    Ok(())
}

#[derive(Serialize)]
struct SolveReport<'a> {
    mode: Mode,
    seed: u64,
    iterations: Vec<u64>,
    solve_time: f64,
    cost: f64,
    central_cost: f64,
    gap: f64,
    eps_g: f64,
    max_coupling_excess: f64,
    lambda_error: f64,
    trace_csv: String,
    certificate: CertificateReport<'a>,
}

pub fn solve_once(cfg: &DmpcConfig, problem: &DmpcProblem, x: &[DVector<f64>], out_dir: &Path, json: bool) -> Result<()> {
    let central = problem.central(x)?;
    let sets = problem.input_sets(x)?;
    let ctxs = node_contexts(problem, x, &sets, cfg.beta, cfg.qp);
    let stop = StopRule { check_termination: true, max_local_iterations: cfg.max_local_iterations };
    let mut sc = sim_config(cfg, cfg.mode, stop);
    sc.record_trace = true;
    let out = run_apdg(&cfg.graph, &ctxs, cold_start(problem), &sc)?;

    let mut cost = 0.0;
    let mut coupling = DVector::zeros(problem.b_eps.len());
    for ((s, st), xi) in problem.subsystems.iter().zip(&out.states).zip(x) {
        let u = st.u.as_ref().expect("terminated node has solved at least once");
        cost += s.cp.cost(xi, u);
        coupling += s.cp.coupling(xi, u);
    }
    let lambda_error = out.states.iter().map(|s| (&s.lambda - &central.lambda).norm()).fold(0.0, f64::max);
    let path = write_file(out_dir, "solve_once_events.csv", &netsim::trace_csv(&out.trace))?;
    let (inp, cert) = certificate_for(cfg, problem)?;
    let report = SolveReport {
        mode: cfg.mode,
        seed: cfg.seed,
        iterations: out.iterations(),
        solve_time: out.finish_time,
        cost,
        central_cost: central.j_star,
        gap: cost - central.j_star,
        eps_g: cfg.thresholds.eps_g,
        max_coupling_excess: (coupling - &problem.b_eps).max(),
        lambda_error,
        trace_csv: path.display().to_string(),
        certificate: CertificateReport::new(inp, &cert),
    };
    if json {
        return print_json(&report);
    }
    println!("mode {:?}, seed {}", report.mode, report.seed);
    println!("iterations per node: {:?}", report.iterations);
    println!("simulated solve time: {:.4} s", report.solve_time);
    println!(
        "J = {:.10}, J* = {:.10}, J − J* = {:.3e} (ε_g = {})",
        report.cost, report.central_cost, report.gap, report.eps_g
    );
    println!("max(Σ𝔤 − b(ε)) = {:.3e}, max‖λⁱ − λ*‖ = {:.3e}", report.max_coupling_excess, report.lambda_error);
    report.certificate.print();
    println!("wrote {}", report.trace_csv);
    Ok(())
}

fn fig3_csv(primary: &MpcTrace, other: &MpcTrace, mode: Mode) -> String {
    let (a, s) = match mode {
        Mode::Async => (primary, other),
        Mode::Synchronous => (other, primary),
    };
    let mut out = String::from("t,async_seconds,sync_seconds\n");
    for (sa, ss) in a.steps.iter().zip(&s.steps) {
        let _ = writeln!(out, "{},{},{}", sa.t, fmt17(sa.solve_time), fmt17(ss.solve_time));
    }
    out
}

fn fig4_csv(trace: &MpcTrace, problem: &DmpcProblem) -> String {
    let rho = problem.subsystems.first().map_or(0, |s| s.sys.rho());
    let mut header: Vec<String> = vec!["t".into()];
    header.extend((0..rho).map(|r| format!("g{}", r + 1)));
    for (i, s) in problem.subsystems.iter().enumerate() {
        header.extend((0..s.cp.m).map(|j| format!("u{}_{}", i + 1, j + 1)));
    }
    let mut out = header.join(",") + "\n";
    for step in &trace.steps {
        let mut cells = vec![step.t.to_string()];
        cells.extend(step.global_constraint.iter().map(|v| fmt17(*v)));
        for (s, n) in problem.subsystems.iter().zip(&step.nodes) {
            cells.extend(n.applied(s.cp.m).iter().map(|v| fmt17(*v)));
        }
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}

fn fig5_csv(trace: &MpcTrace, problem: &DmpcProblem) -> String {
    let mut header: Vec<String> = vec!["t".into()];
    for (i, s) in problem.subsystems.iter().enumerate() {
        header.extend((0..s.cp.n).map(|j| format!("x{}_{}", i + 1, j + 1)));
    }
    let mut out = header.join(",") + "\n";
    for step in &trace.steps {
        let mut cells = vec![step.t.to_string()];
        cells.extend(step.nodes.iter().flat_map(|n| n.x.iter().map(|v| fmt17(*v))));
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}

#[derive(Serialize)]
struct ClosedLoopReport {
    mode: Mode,
    steps: usize,
    iterations: u64,
    final_state_norm: f64,
    files: Vec<String>,
}

pub fn closed_loop(cfg: &DmpcConfig, problem: &DmpcProblem, out_dir: &Path, json: bool) -> Result<()> {
    let trace = closed_loop_with(problem, cfg)?;
    // the solve-time figure compares both modes on the same seed
    let mut other_cfg = cfg.clone();
    other_cfg.mode = match cfg.mode {
        Mode::Async => Mode::Synchronous,
        Mode::Synchronous => Mode::Async,
    };
    let other = closed_loop_with(problem, &other_cfg)?;

    let files = [
        ("trace.csv", trace_csv(&trace, problem)),
        ("fig3_solve_time.csv", fig3_csv(&trace, &other, cfg.mode)),
        ("fig4_constraint.csv", fig4_csv(&trace, problem)),
        ("fig5_states.csv", fig5_csv(&trace, problem)),
        ("plot.py", PLOT_SCRIPT.to_string()),
    ];
    let mut written = Vec::with_capacity(files.len());
    for (name, text) in &files {
        written.push(write_file(out_dir, name, text)?.display().to_string());
    }
    let report = ClosedLoopReport {
        mode: cfg.mode,
        steps: trace.steps.len(),
        iterations: trace.steps.iter().flat_map(|s| s.nodes.iter().map(|n| n.iterations)).sum(),
        final_state_norm: trace.final_x.iter().map(|x| x.norm_squared()).sum::<f64>().sqrt(),
        files: written,
    };
    if json {
        return print_json(&report);
    }
    println!(
        "{} steps in {:?} mode, {} local iterations in total, final ‖x‖ = {:.3e}",
        report.steps, report.mode, report.iterations, report.final_state_norm
    );
    for f in &report.files {
        println!("wrote {f}");
    }
    Ok(())
}
