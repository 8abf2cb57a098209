//! Problem instances: domain, horizon, coefficients, control set, initial
//! law, plus the relaxed-control averaging extension and sampled validation.
//!
//! Coefficients are black-box evaluators of (x, v, z, t).  The diffusion
//! matrix is b = beta beta^T / 2; the solver never asks the user for beta
//! and recovers it as the symmetric PSD square root of 2b when simulating.
//! Declared sup-norm bounds are spot-checked on samples, not proved.

use std::fmt;
use std::sync::Arc;

use crate::error::{BhjbError, Result};
use crate::expr::EvalCtx;
use crate::grid::SpatialGrid;
use crate::linalg::kahan_sum;
use crate::report::{ValidationReport, Witness};

/// Box domain in 1 or 2 dimensions.  An unbounded problem is represented by
/// the truncation box [-r, r]^n with the flag kept for reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialDomain {
    pub dim: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub truncated_from_unbounded: bool,
}

impl SpatialDomain {
    pub fn bounded(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let dim = lower.len();
        if dim == 0 || dim > 2 || upper.len() != dim {
            return Err(BhjbError::Config(format!(
                "domain: dimension must be 1 or 2, got lower {} / upper {}",
                lower.len(),
                upper.len()
            )));
        }
        for ax in 0..dim {
            if !(lower[ax].is_finite() && upper[ax].is_finite() && lower[ax] < upper[ax]) {
                return Err(BhjbError::Config(format!(
                    "domain: axis {ax} needs lower < upper, got [{}, {}]",
                    lower[ax], upper[ax]
                )));
            }
        }
        Ok(SpatialDomain { dim, lower, upper, truncated_from_unbounded: false })
    }

    /// Truncation box for an unbounded domain, with zero boundary data.
    pub fn truncated(dim: usize, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(BhjbError::Config(format!("domain: truncation radius must be > 0, got {radius}")));
        }
        let mut d = SpatialDomain::bounded(vec![-radius; dim], vec![radius; dim])?;
        d.truncated_from_unbounded = true;
        Ok(d)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        (0..self.dim).all(|ax| x[ax] > self.lower[ax] && x[ax] < self.upper[ax])
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim).map(|ax| self.upper[ax] - self.lower[ax]).product()
    }
}

/// Finite discretization of the compact control set.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSet {
    pub points: Vec<Vec<f64>>,
    pub is_convex_hull_sampled: bool,
}

impl ControlSet {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        if points.is_empty() {
            return Err(BhjbError::Config("control set: needs at least one point".into()));
        }
        let m = points[0].len();
        if m == 0 {
            return Err(BhjbError::Config("control set: points must have dimension >= 1".into()));
        }
        for (i, p) in points.iter().enumerate() {
            if p.len() != m {
                return Err(BhjbError::Config(format!(
                    "control set: point {i} has dimension {}, expected {m}",
                    p.len()
                )));
            }
            if p.iter().any(|c| !c.is_finite()) {
                return Err(BhjbError::Config(format!("control set: point {i} not finite")));
            }
            for q in &points[..i] {
                if p == q {
                    return Err(BhjbError::Config(format!("control set: duplicate point {p:?}")));
                }
            }
        }
        Ok(ControlSet { points, is_convex_hull_sampled: false })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn control_dim(&self) -> usize {
        self.points[0].len()
    }
}

/// Probability weights over the control points.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedMeasure {
    pub weights: Vec<f64>,
}

impl RelaxedMeasure {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(BhjbError::Config("relaxed measure: weights must be >= 0".into()));
        }
        let total = kahan_sum(weights.iter().copied());
        if (total - 1.0).abs() > 1e-12 {
            return Err(BhjbError::Config(format!(
                "relaxed measure: weights sum to {total}, expected 1 within 1e-12"
            )));
        }
        Ok(RelaxedMeasure { weights })
    }

    pub fn dirac(m: usize, j: usize) -> Self {
        let mut weights = vec![0.0; m];
        weights[j] = 1.0;
        RelaxedMeasure { weights }
    }
}

pub type ScalarCoef = Arc<dyn Fn(&EvalCtx) -> f64 + Send + Sync>;

/// Wraps a plain closure as a coefficient evaluator.
pub fn coef<F: Fn(&EvalCtx) -> f64 + Send + Sync + 'static>(f: F) -> ScalarCoef {
    Arc::new(f)
}

pub fn const_coef(c: f64) -> ScalarCoef {
    Arc::new(move |_| c)
}

/// Drift vector, diffusion matrix and running cost, with declared sup-norm
/// bounds.  `diffusion[i][j]` must be symmetric; validation spot-checks it.
#[derive(Clone)]
pub struct CoefficientField {
    pub drift: Vec<ScalarCoef>,
    pub diffusion: Vec<Vec<ScalarCoef>>,
    pub running_cost: ScalarCoef,
    pub drift_bound: f64,
    pub diffusion_bound: f64,
    pub cost_bound: f64,
}

impl fmt::Debug for CoefficientField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientField")
            .field("n", &self.drift.len())
            .field("drift_bound", &self.drift_bound)
            .field("diffusion_bound", &self.diffusion_bound)
            .field("cost_bound", &self.cost_bound)
            .finish()
    }
}

impl CoefficientField {
    pub fn dim(&self) -> usize {
        self.drift.len()
    }

    pub fn drift_at(&self, ctx: &EvalCtx, out: &mut [f64]) {
        for (i, f) in self.drift.iter().enumerate() {
            out[i] = f(ctx);
        }
    }

    pub fn diffusion_at(&self, ctx: &EvalCtx, i: usize, j: usize) -> f64 {
        (self.diffusion[i][j])(ctx)
    }

    pub fn cost_at(&self, ctx: &EvalCtx) -> f64 {
        (self.running_cost)(ctx)
    }
}

/// Initial law of the state: a density on the run's grid, or a point mass.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialLaw {
    GridDensity { values: Vec<f64> },
    Dirac { point: Vec<f64> },
}

impl InitialLaw {
    /// Constant density normalized exactly against the grid quadrature.
    pub fn uniform(grid: &SpatialGrid, domain: &SpatialDomain) -> Self {
        InitialLaw::GridDensity { values: vec![1.0 / domain.volume(); grid.len()] }
    }
}

#[derive(Debug, Clone)]
pub struct ControlProblem {
    pub id: String,
    pub domain: SpatialDomain,
    pub horizon: f64,
    pub coefficients: CoefficientField,
    pub controls: ControlSet,
    pub initial_law: InitialLaw,
    /// Dimension d of the observable parameter z.
    pub z_dim: usize,
    /// Representative z-values used when sampling validation points; the
    /// CLI merges the scenario tree's z-values in before validating.
    pub z_hints: Vec<Vec<f64>>,
}

impl ControlProblem {
    pub fn dim(&self) -> usize {
        self.domain.dim
    }

    pub fn z_hints_or_zero(&self) -> Vec<Vec<f64>> {
        if self.z_hints.is_empty() {
            vec![vec![0.0; self.z_dim.max(1)]]
        } else {
            self.z_hints.clone()
        }
    }
}

/// Averages one coefficient component over a relaxed measure:
/// sum_j pi_j * field(x, v_j, z, t).  Affine in the measure by construction.
pub fn relax_coefficient(
    field: &ScalarCoef,
    controls: &ControlSet,
    x: &[f64],
    z: &[f64],
    t: f64,
    u: &RelaxedMeasure,
) -> Result<f64> {
    if u.weights.len() != controls.len() {
        return Err(BhjbError::Dimension(format!(
            "relaxed measure has {} weights for {} control points",
            u.weights.len(),
            controls.len()
        )));
    }
    let mut acc = 0.0;
    for (j, w) in u.weights.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        acc += w * field(&EvalCtx { x, v: &controls.points[j], z, t });
    }
    Ok(acc)
}

/// Deterministic Kronecker low-discrepancy sequence on [0,1)^dim.
/// Used for validation and Cordes sampling; reproducible by construction.
pub struct KroneckerSeq {
    alphas: Vec<f64>,
    k: usize,
}

impl KroneckerSeq {
    pub fn new(dim: usize) -> Self {
        // square roots of the first primes are irrational and independent
        const PRIMES: [f64; 8] = [2.0, 3.0, 5.0, 7.0, 11.0, 13.0, 17.0, 19.0];
        let alphas = (0..dim).map(|i| PRIMES[i % PRIMES.len()].sqrt().fract()).collect();
        KroneckerSeq { alphas, k: 0 }
    }

    pub fn next_point(&mut self, out: &mut [f64]) {
        self.k += 1;
        for (i, a) in self.alphas.iter().enumerate() {
            out[i] = (0.5 + self.k as f64 * a).fract();
        }
    }
}

/// One sampled evaluation point covering Q x z-range.
#[derive(Debug, Clone)]
pub struct SamplePoint {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub t: f64,
}

/// Low-discrepancy (x, z, t) samples over the domain, the z-hints, and
/// [0, T], always including the box center and corners.
pub fn sample_points(problem: &ControlProblem, budget: usize) -> Vec<SamplePoint> {
    let n = problem.dim();
    let hints = problem.z_hints_or_zero();
    let mut seq = KroneckerSeq::new(n + 1);
    let mut buf = vec![0.0; n + 1];
    let mut out = Vec::with_capacity(budget.max(1) + 3);

    // deterministic anchor points: center and corners at t = 0 and t = T
    let center: Vec<f64> =
        (0..n).map(|ax| 0.5 * (problem.domain.lower[ax] + problem.domain.upper[ax])).collect();
    for t in [0.0, problem.horizon] {
        out.push(SamplePoint { x: center.clone(), z: hints[0].clone(), t });
    }
    let mut corner_count = 1usize << n;
    if corner_count > 4 {
        corner_count = 4;
    }
    for c in 0..corner_count {
        let x: Vec<f64> = (0..n)
            .map(|ax| if c >> ax & 1 == 0 { problem.domain.lower[ax] } else { problem.domain.upper[ax] })
            .collect();
        out.push(SamplePoint { x, z: hints[0].clone(), t: 0.0 });
    }

    for k in 0..budget.max(1) {
        seq.next_point(&mut buf);
        let x: Vec<f64> = (0..n)
            .map(|ax| problem.domain.lower[ax] + buf[ax] * (problem.domain.upper[ax] - problem.domain.lower[ax]))
            .collect();
        let t = buf[n] * problem.horizon;
        let z = hints[k % hints.len()].clone();
        out.push(SamplePoint { x, z, t });
    }
    out
}

/// Spot-checks the problem on `sample_budget` low-discrepancy points; every
/// control point is evaluated at every sample.  The report lists one entry
/// per check with the worst witness; the problem is accepted iff all pass.
pub fn validate_problem(
    problem: &ControlProblem,
    grid: &SpatialGrid,
    sample_budget: usize,
) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = problem.dim();
    let samples = sample_points(problem, sample_budget.max(1));
    report.sample_count = samples.len() * problem.controls.len();

    // structural checks first; they do not need samples
    report.push(
        "horizon",
        problem.horizon > 0.0 && problem.horizon.is_finite(),
        format!("T = {}", problem.horizon),
        None,
    );
    report.push(
        "coefficient_dim",
        problem.coefficients.dim() == n && problem.coefficients.diffusion.len() == n,
        format!("drift/diffusion dimension vs domain dimension {n}"),
        None,
    );

    let mut drift_buf = vec![0.0; n];
    let mut non_finite: Option<Witness> = None;
    let mut sym_worst: Option<Witness> = None;
    let mut bound_worst: Option<(String, Witness)> = None;
    let mut ellip_min: Option<Witness> = None;

    for s in &samples {
        for vpt in &problem.controls.points {
            let ctx = EvalCtx { x: &s.x, v: vpt, z: &s.z, t: s.t };
            let witness = |value: f64| Witness {
                x: s.x.clone(),
                v: Some(vpt.clone()),
                z: s.z.clone(),
                t: s.t,
                value,
            };

            problem.coefficients.drift_at(&ctx, &mut drift_buf);
            let cost = problem.coefficients.cost_at(&ctx);
            let mut b = [[0.0f64; 2]; 2];
            for i in 0..n {
                for j in 0..n {
                    b[i][j] = problem.coefficients.diffusion_at(&ctx, i, j);
                }
            }

            let mut vals: Vec<f64> = drift_buf.clone();
            vals.push(cost);
            for i in 0..n {
                for j in 0..n {
                    vals.push(b[i][j]);
                }
            }
            if non_finite.is_none() {
                if let Some(&bad) = vals.iter().find(|v| !v.is_finite()) {
                    non_finite = Some(witness(bad));
                }
            }

            if n == 2 {
                let asym = (b[0][1] - b[1][0]).abs();
                if asym > sym_worst.as_ref().map_or(1e-12, |w| w.value) {
                    sym_worst = Some(witness(asym));
                }
            }

            let drift_norm = drift_buf.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let diff_norm =
                (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).fold(0.0f64, |m, (i, j)| m.max(b[i][j].abs()));
            for (name, val, bound) in [
                ("drift", drift_norm, problem.coefficients.drift_bound),
                ("diffusion", diff_norm, problem.coefficients.diffusion_bound),
                ("cost", cost.abs(), problem.coefficients.cost_bound),
            ] {
                if val > bound {
                    let exceed = val - bound;
                    if bound_worst.as_ref().map_or(true, |(_, w)| exceed > w.value) {
                        bound_worst = Some((name.to_string(), witness(exceed)));
                    }
                }
            }

            let min_eig = if n == 1 { b[0][0] } else { crate::linalg::sym_eig_2x2(b[0][0], b[0][1], b[1][1]).0 };
            if ellip_min.as_ref().map_or(true, |w| min_eig < w.value) {
                ellip_min = Some(witness(min_eig));
            }
        }
    }

    report.push(
        "finiteness",
        non_finite.is_none(),
        match &non_finite {
            None => "all coefficient evaluations finite".into(),
            Some(w) => format!("non-finite value {} at x={:?}, t={}", w.value, w.x, w.t),
        },
        non_finite,
    );
    report.push(
        "symmetry",
        sym_worst.is_none(),
        match &sym_worst {
            None => "|b - b^T| <= 1e-12 on all samples".into(),
            Some(w) => format!("|b12 - b21| = {:.3e}", w.value),
        },
        sym_worst,
    );
    report.push(
        "boundedness",
        bound_worst.is_none(),
        match &bound_worst {
            None => "declared bounds hold on all samples".into(),
            Some((name, w)) => format!("{name} exceeds declared bound by {:.3e}", w.value),
        },
        bound_worst.map(|(_, w)| w),
    );
    let ellip_pass = ellip_min.as_ref().map_or(false, |w| w.value > 0.0 && w.value.is_finite());
    report.push(
        "ellipticity",
        ellip_pass,
        match &ellip_min {
            Some(w) => format!("min eigenvalue of b over samples = {:.6e}", w.value),
            None => "no samples".into(),
        },
        ellip_min,
    );

    match &problem.initial_law {
        InitialLaw::GridDensity { values } => {
            if values.len() != grid.len() {
                report.push(
                    "initial_law",
                    false,
                    format!("grid density has {} values for {} grid nodes", values.len(), grid.len()),
                    None,
                );
            } else {
                let neg = values.iter().cloned().fold(0.0f64, f64::min);
                let mass = grid.integrate(values);
                let ok = neg >= 0.0 && (mass - 1.0).abs() <= 1e-8;
                report.push(
                    "initial_law",
                    ok,
                    format!("min density {neg:.3e}, mass {mass:.10}"),
                    None,
                );
            }
        }
        InitialLaw::Dirac { point } => {
            let ok = point.len() == n && problem.domain.contains(point);
            report.push(
                "initial_law",
                ok,
                format!("dirac point {point:?} strictly inside the domain: {ok}"),
                None,
            );
        }
    }

    report
}

/// Problem accepted by `validate_problem` for a specific grid; solver entry
/// points take this wrapper so rejected problems cannot reach them.
#[derive(Debug, Clone)]
pub struct ValidatedProblem {
    problem: ControlProblem,
    grid_counts: [usize; 2],
    pub report: ValidationReport,
}

impl ValidatedProblem {
    pub fn new(problem: ControlProblem, grid: &SpatialGrid, sample_budget: usize) -> Result<Self> {
        let report = validate_problem(&problem, grid, sample_budget);
        if !report.accepted() {
            return Err(BhjbError::Validation(
                report.first_failure().unwrap_or_else(|| "unknown check".into()),
            ));
        }
        Ok(ValidatedProblem { problem, grid_counts: grid.counts, report })
    }

    pub fn matches_grid(&self, grid: &SpatialGrid) -> bool {
        self.grid_counts == grid.counts
    }
}

impl std::ops::Deref for ValidatedProblem {
    type Target = ControlProblem;

    fn deref(&self) -> &ControlProblem {
        &self.problem
    }
}
