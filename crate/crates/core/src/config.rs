//! TOML (or JSON) experiment files.
//!
//! Matrices are row-major lists of rows, graph edges are 1-based, and each
//! local set is either a box `{ lo, hi }` or halfspaces `{ g, h }`.
//! [`FileConfig::normalized`] expands boxes so that writing and re-reading a
//! normalized file is the identity.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::apdg::Thresholds;
use crate::dmpc::DmpcConfig;
use crate::error::{Error, Result};
use crate::model::LtiSubsystem;
use crate::netsim::{AfterTermination, Digraph, Mode, Schedule};
use crate::polytope::Polytope;
use crate::qp::QpSettings;

/// The four-tank experiment.
pub const WATERTANK_CFG: &str = include_str!("../data/watertank.cfg");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SetSpec {
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Halfspaces { g: Vec<Vec<f64>>, h: Vec<f64> },
}

impl SetSpec {
    fn to_polytope(&self, field: &str) -> Result<Polytope> {
        match self {
            SetSpec::Box { lo, hi } => {
                if lo.len() != hi.len() || lo.is_empty() {
                    return Err(invalid(field, "box bounds must be nonempty and of equal length"));
                }
                if lo.iter().zip(hi).any(|(l, h)| !(l <= h)) {
                    return Err(invalid(field, "box needs lo <= hi"));
                }
                Ok(Polytope::from_box(lo, hi))
            }
            SetSpec::Halfspaces { g, h } => {
                let g = matrix(g, field)?;
                Polytope::new(g, DVector::from_vec(h.clone())).map_err(|e| invalid(field, &e.to_string()))
            }
        }
    }

    fn from_polytope(p: &Polytope) -> Self {
        SetSpec::Halfspaces { g: rows_of(p.g()), h: p.h().iter().copied().collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsystemSpec {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
    #[serde(rename = "Cg")]
    pub cg: Vec<Vec<f64>>,
    #[serde(rename = "Dg")]
    pub dg: Vec<Vec<f64>>,
    #[serde(rename = "X")]
    pub x_set: SetSpec,
    #[serde(rename = "U")]
    pub u_set: SetSpec,
    pub x0: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub nodes: usize,
    /// 1-based `[from, to]` pairs.
    pub edges: Vec<[usize; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub tau_lo: f64,
    pub tau_hi: f64,
    pub tau_delay: f64,
    #[serde(default)]
    pub speed: Option<Vec<f64>>,
}

fn default_max_iter() -> u64 {
    100_000
}

fn default_t_sim() -> usize {
    40
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: u64,
    pub horizon: usize,
    pub gamma: f64,
    pub beta: f64,
    #[serde(default = "default_t_sim")]
    pub t_sim: usize,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub warm_start: bool,
    #[serde(default = "default_max_iter")]
    pub max_local_iterations: u64,
    #[serde(default)]
    pub after_termination: AfterTermination,
    pub thresholds: Thresholds,
    pub graph: GraphSpec,
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub qp: QpSettings,
    pub subsystem: Vec<SubsystemSpec>,
}

fn invalid(field: &str, msg: &str) -> Error {
    Error::ConfigInvalid(format!("{field}: {msg}"))
}

fn matrix(rows: &[Vec<f64>], field: &str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 {
        return Err(invalid(field, "matrix must be nonempty"));
    }
    if rows.iter().any(|row| row.len() != c) {
        return Err(invalid(field, "matrix rows have unequal length"));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(invalid(field, "matrix entries must be finite"));
    }
    Ok(DMatrix::from_row_iterator(r, c, rows.iter().flatten().copied()))
}

pub fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl FileConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))
    }

    /// Accepts TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            Self::from_json_str(text)
        } else {
            Self::from_toml_str(text)
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::ConfigInvalid(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config is serializable")
    }

    /// Boxes expanded to halfspaces and optional fields filled in.
    pub fn normalized(&self) -> Result<Self> {
        let mut out = self.clone();
        for (i, s) in out.subsystem.iter_mut().enumerate() {
            let f = |name: &str| format!("subsystem[{}].{name}", i + 1);
            s.x_set = SetSpec::from_polytope(&s.x_set.to_polytope(&f("X"))?);
            s.u_set = SetSpec::from_polytope(&s.u_set.to_polytope(&f("U"))?);
        }
        if out.schedule.speed.is_none() {
            out.schedule.speed = Some(vec![1.0; out.graph.nodes]);
        }
        let mut edges = out.graph.edges.clone();
        edges.sort_unstable();
        edges.dedup();
        out.graph.edges = edges;
        Ok(out)
    }

    pub fn to_dmpc(&self) -> Result<DmpcConfig> {
        let mut subsystems = Vec::with_capacity(self.subsystem.len());
        let mut x0 = Vec::with_capacity(self.subsystem.len());
        for (i, s) in self.subsystem.iter().enumerate() {
            let f = |name: &str| format!("subsystem[{}].{name}", i + 1);
            let sys = LtiSubsystem {
                a: matrix(&s.a, &f("A"))?,
                b: matrix(&s.b, &f("B"))?,
                q: matrix(&s.q, &f("Q"))?,
                r: matrix(&s.r, &f("R"))?,
                x_set: s.x_set.to_polytope(&f("X"))?,
                u_set: s.u_set.to_polytope(&f("U"))?,
                cg: matrix(&s.cg, &f("Cg"))?,
                dg: matrix(&s.dg, &f("Dg"))?,
            };
            sys.validate().map_err(|e| match e {
                Error::NotPositiveDefinite { field } => invalid(&f(&field), "matrix is not symmetric positive definite"),
                Error::OriginNotInterior { field } => invalid(&f(&field), "origin is not in the interior"),
                other => invalid(&format!("subsystem[{}]", i + 1), &other.to_string()),
            })?;
            subsystems.push(sys);
            x0.push(DVector::from_vec(s.x0.clone()));
        }
        for &[from, to] in &self.graph.edges {
            if from == 0 || to == 0 || from > self.graph.nodes || to > self.graph.nodes {
                return Err(invalid("graph.edges", &format!("edge [{from}, {to}] is outside 1..={}", self.graph.nodes)));
            }
        }
        let edges: Vec<(usize, usize)> = self.graph.edges.iter().map(|&[a, b]| (a - 1, b - 1)).collect();
        let graph = Digraph::new(self.graph.nodes, &edges).map_err(|e| invalid("graph", &e.to_string()))?;
        let schedule = Schedule {
            tau_lo: self.schedule.tau_lo,
            tau_hi: self.schedule.tau_hi,
            tau_delay: self.schedule.tau_delay,
            speed: self.schedule.speed.clone().unwrap_or_else(|| vec![1.0; self.graph.nodes]),
        };
        let cfg = DmpcConfig {
            subsystems,
            horizon: self.horizon,
            gamma: self.gamma,
            thresholds: self.thresholds,
            graph,
            schedule,
            mode: self.mode,
            beta: self.beta,
            seed: self.seed,
            t_sim: self.t_sim,
            x0,
            warm_start: self.warm_start,
            max_local_iterations: self.max_local_iterations,
            after_termination: self.after_termination,
            qp: self.qp,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_dmpc(cfg: &DmpcConfig) -> Self {
        FileConfig {
            seed: cfg.seed,
            horizon: cfg.horizon,
            gamma: cfg.gamma,
            beta: cfg.beta,
            t_sim: cfg.t_sim,
            mode: cfg.mode,
            warm_start: cfg.warm_start,
            max_local_iterations: cfg.max_local_iterations,
            after_termination: cfg.after_termination,
            thresholds: cfg.thresholds,
            graph: GraphSpec {
                nodes: cfg.graph.len(),
                edges: cfg.graph.edges().iter().map(|&(a, b)| [a + 1, b + 1]).collect(),
            },
            schedule: ScheduleSpec {
                tau_lo: cfg.schedule.tau_lo,
                tau_hi: cfg.schedule.tau_hi,
                tau_delay: cfg.schedule.tau_delay,
                speed: Some(cfg.schedule.speed.clone()),
            },
            qp: cfg.qp,
            subsystem: cfg
                .subsystems
                .iter()
                .zip(&cfg.x0)
                .map(|(s, x0)| SubsystemSpec {
                    a: rows_of(&s.a),
                    b: rows_of(&s.b),
                    q: rows_of(&s.q),
                    r: rows_of(&s.r),
                    cg: rows_of(&s.cg),
                    dg: rows_of(&s.dg),
                    x_set: SetSpec::from_polytope(&s.x_set),
                    u_set: SetSpec::from_polytope(&s.u_set),
                    x0: x0.iter().copied().collect(),
                })
                .collect(),
        }
    }
}

/// Parses and validates a config file.
pub fn load(path: &Path) -> Result<DmpcConfig> {
    FileConfig::read(path)?.to_dmpc()
}

/// The bundled water-tank experiment.
pub fn watertank() -> DmpcConfig {
    FileConfig::from_toml_str(WATERTANK_CFG)
        .and_then(|c| c.to_dmpc())
        .expect("bundled config is valid")
}
