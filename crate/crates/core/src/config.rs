//! Declarative problem and run configuration
//!
//! Problems enter the tool as JSON: coefficient expressions over the
//! variables x (or x1, x2), v (v1, ...), z (z1, ...) and t, a bounded box
//! domain, a finite control set, an initial law, and declared coefficient
//! bounds.  The same structures serialize back out, so a resolved
//! configuration written next to the results reloads to an equivalent run.

use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::cordes::{CaseIIIParams, CaseSelect, CordesOptions};
use crate::error::{BhjbError, Result};
use crate::expr::parse_bound;
use crate::grid::SpatialGrid;
use crate::problem::{
    CoefficientField, ControlProblem, ControlSet, InitialLaw, ScalarCoef, SpatialDomain,
};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DomainConfig {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    #[serde(default)]
    pub truncated_from_unbounded: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BoundsConfig {
    pub drift: f64,
    pub diffusion: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LawConfig {
    /// Uniform density over the domain, realized on the grid.
    Uniform,
    Dirac { point: Vec<f64> },
    GridDensity { values: Vec<f64> },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProblemConfig {
    pub id: String,
    pub domain: DomainConfig,
    pub horizon: f64,
    /// Drift expressions, one per spatial axis.
    pub drift: Vec<String>,
    /// Diffusion matrix expressions, row major, n x n.
    pub diffusion: Vec<Vec<String>>,
    pub running_cost: String,
    pub bounds: BoundsConfig,
    pub controls: Vec<Vec<f64>>,
    pub initial_law: LawConfig,
    #[serde(default = "default_z_dim")]
    pub z_dim: usize,
    /// Representative z values for validation sampling; the driver merges
    /// the tree's own z values in before validating.
    #[serde(default)]
    pub z_hints: Vec<Vec<f64>>,
}

fn default_z_dim() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GridConfig {
    pub counts: Vec<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { counts: vec![101] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SchemeConfig {
    pub theta: f64,
    pub policy_iter_tol: f64,
    pub max_policy_iters: usize,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        SchemeConfig { theta: 1.0, policy_iter_tol: 1e-10, max_policy_iters: 100 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SimConfig {
    pub n_paths: usize,
    pub substeps: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { n_paths: 10_000, substeps: 4, seed: 42 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CaseIIIConfig {
    pub active: Vec<usize>,
    pub gammas: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CordesConfig {
    pub case: CaseSelect,
    /// Optional explicit control-free part of the diffusion decomposition,
    /// expressions over (x, z, t) only.
    pub bbar: Option<Vec<Vec<String>>>,
    pub case_iii: Option<CaseIIIConfig>,
    pub samples: usize,
}

impl Default for CordesConfig {
    fn default() -> Self {
        CordesConfig { case: CaseSelect::Auto, bbar: None, case_iii: None, samples: 512 }
    }
}

/// Content of a `--config` file: a problem (or a preset reference) plus
/// discretization, scheme, simulation and certification settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct FileConfig {
    pub problem: Option<ProblemConfig>,
    pub preset: Option<String>,
    pub grid: GridConfig,
    pub scheme: SchemeConfig,
    pub simulation: SimConfig,
    pub cordes: CordesConfig,
}

impl FileConfig {
    pub fn from_json(src: &str) -> Result<FileConfig> {
        let cfg: FileConfig = serde_json::from_str(src)?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn check(&self) -> Result<()> {
        if self.problem.is_some() && self.preset.is_some() {
            return Err(BhjbError::Config(
                "config fields `problem` and `preset` are mutually exclusive".into(),
            ));
        }
        if self.scheme.policy_iter_tol <= 0.0 {
            return Err(BhjbError::Config("scheme.policy_iter_tol must be > 0".into()));
        }
        if self.scheme.max_policy_iters == 0 {
            return Err(BhjbError::Config("scheme.max_policy_iters must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.scheme.theta) {
            return Err(BhjbError::Config("scheme.theta must lie in [0, 1]".into()));
        }
        if self.grid.counts.is_empty() || self.grid.counts.len() > 2 {
            return Err(BhjbError::Config("grid.counts needs 1 or 2 axes".into()));
        }
        if self.simulation.n_paths == 0 || self.simulation.substeps == 0 {
            return Err(BhjbError::Config(
                "simulation.n_paths and simulation.substeps must be >= 1".into(),
            ));
        }
        if self.cordes.samples == 0 {
            return Err(BhjbError::Config("cordes.samples must be >= 1".into()));
        }
        Ok(())
    }
}

fn expr_coef(src: &str, field: &str, n: usize, m: usize, d: usize) -> Result<ScalarCoef> {
    let expr = parse_bound(src, n, m, d)
        .map_err(|e| BhjbError::Config(format!("{field}: {e}")))?;
    Ok(Arc::new(move |ctx| expr.eval(ctx)))
}

/// Builds the domain alone; grid construction needs it before the rest of
/// the problem can be assembled.
pub fn build_domain(cfg: &ProblemConfig) -> Result<SpatialDomain> {
    SpatialDomain::bounded(cfg.domain.lower.clone(), cfg.domain.upper.clone()).map(|mut d| {
        d.truncated_from_unbounded = cfg.domain.truncated_from_unbounded;
        d
    })
}

/// Compiles a problem config into evaluable coefficients on the given grid.
pub fn build_problem(cfg: &ProblemConfig, grid: &SpatialGrid) -> Result<ControlProblem> {
    let domain = build_domain(cfg)?;
    let n = domain.dim;
    if cfg.drift.len() != n {
        return Err(BhjbError::Config(format!(
            "drift: expected {n} expressions, got {}",
            cfg.drift.len()
        )));
    }
    if cfg.diffusion.len() != n || cfg.diffusion.iter().any(|r| r.len() != n) {
        return Err(BhjbError::Config(format!("diffusion: expected an {n} x {n} matrix")));
    }
    if cfg.horizon <= 0.0 {
        return Err(BhjbError::Config("horizon must be > 0".into()));
    }
    if cfg.bounds.drift <= 0.0 || cfg.bounds.diffusion <= 0.0 || cfg.bounds.cost <= 0.0 {
        return Err(BhjbError::Config("bounds must all be > 0".into()));
    }
    let controls = ControlSet::new(cfg.controls.clone())?;
    let m = controls.points[0].len();
    let d = cfg.z_dim;

    let drift: Result<Vec<ScalarCoef>> = cfg
        .drift
        .iter()
        .enumerate()
        .map(|(i, s)| expr_coef(s, &format!("drift[{i}]"), n, m, d))
        .collect();
    let diffusion: Result<Vec<Vec<ScalarCoef>>> = cfg
        .diffusion
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(j, s)| expr_coef(s, &format!("diffusion[{i}][{j}]"), n, m, d))
                .collect()
        })
        .collect();
    let running_cost = expr_coef(&cfg.running_cost, "running_cost", n, m, d)?;

    let initial_law = match &cfg.initial_law {
        LawConfig::Uniform => InitialLaw::uniform(grid, &domain),
        LawConfig::Dirac { point } => {
            if point.len() != n {
                return Err(BhjbError::Config("initial_law.point dimension mismatch".into()));
            }
            InitialLaw::Dirac { point: point.clone() }
        }
        LawConfig::GridDensity { values } => {
            if values.len() != grid.len() {
                return Err(BhjbError::Config(format!(
                    "initial_law.values has {} entries for a {}-node grid",
                    values.len(),
                    grid.len()
                )));
            }
            InitialLaw::GridDensity { values: values.clone() }
        }
    };

    Ok(ControlProblem {
        id: cfg.id.clone(),
        domain,
        horizon: cfg.horizon,
        coefficients: CoefficientField {
            drift: drift?,
            diffusion: diffusion?,
            running_cost,
            drift_bound: cfg.bounds.drift,
            diffusion_bound: cfg.bounds.diffusion,
            cost_bound: cfg.bounds.cost,
        },
        controls,
        initial_law,
        z_dim: cfg.z_dim,
        z_hints: cfg.z_hints.clone(),
    })
}

/// Compiles the certification options, including any explicit bbar
/// expressions (which may not reference v).
pub fn build_cordes_options(cfg: &CordesConfig, problem_cfg: &ProblemConfig) -> Result<CordesOptions> {
    let n = problem_cfg.domain.lower.len();
    let d = problem_cfg.z_dim;
    let bbar = match &cfg.bbar {
        None => None,
        Some(rows) => {
            if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                return Err(BhjbError::Config(format!("cordes.bbar: expected an {n} x {n} matrix")));
            }
            let mut out: Vec<Vec<ScalarCoef>> = Vec::with_capacity(n);
            for (i, row) in rows.iter().enumerate() {
                let mut r = Vec::with_capacity(n);
                for (j, s) in row.iter().enumerate() {
                    // m = 0: any v reference in bbar is rejected
                    r.push(expr_coef(s, &format!("cordes.bbar[{i}][{j}]"), n, 0, d)?);
                }
                out.push(r);
            }
            Some(out)
        }
    };
    let case_iii = match &cfg.case_iii {
        None => None,
        Some(c) => Some(CaseIIIParams::new(c.active.clone(), c.gammas.clone(), n)?),
    };
    Ok(CordesOptions { case: cfg.case, bbar, case_iii, sample_budget: cfg.samples })
}
