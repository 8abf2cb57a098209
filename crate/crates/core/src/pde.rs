//! Finite-difference discretization of the generator
//!
//! ```text
//!   A(x,v,z,t) V = sum_ij b_ij d2V/dx_i dx_j + sum_i f_i dV/dx_i
//! ```
//!
//! backward theta-scheme solves of the parabolic problem with zero terminal
//! and boundary data, and forward Kolmogorov propagation of the killed
//! conditional density, all per scenario-tree node.
//!
//! Second derivatives use central differences; first derivatives are
//! upwinded by the sign of f_i, which costs one order of accuracy but makes
//! I - theta*dt*A an M-matrix (discrete maximum principle, density
//! positivity).  The 2d cross term uses the four-point central stencil and
//! breaks the M-matrix guarantee; the scheme reports `monotone = false`
//! whenever a nonzero b_12 appears.
//!
//! The forward sweep is the exact discrete adjoint of the backward sweep:
//! with M = I - theta*dt*A and B = I + (1-theta)*dt*A assembled per node,
//! densities propagate by p_{k+1} = B^T M^{-T} p_k (copied to each child),
//! which gives the discrete duality identity
//!
//! ```text
//!   <rho, V_0> = sum_k dt_k sum_{n at level k} P(n) <phi_k^n, m_k^n>,
//!   m_k^n = M_n^{-T} p_k^n,
//! ```
//!
//! exactly (to solver precision), not just up to discretization error.
//! Relaxed controls average the assembled stencil rows pointwise, never the
//! raw coefficients, so the averaging commutes with upwinding and the
//! chattering identity survives discretization exactly.

use rayon::prelude::*;

use crate::error::{BhjbError, Result};
use crate::fields::{DensityField, PolicyField, RelaxedPolicyField, ValueField};
use crate::grid::SpatialGrid;
use crate::linalg::{bicgstab, kahan_sum, Csr, Tridiag};
use crate::problem::{ControlProblem, InitialLaw, RelaxedMeasure, ValidatedProblem};
use crate::expr::EvalCtx;
use crate::tree::{conditional_expectation, ValidatedTree};

/// Residual contract for the n = 2 iterative solves.
const KRYLOV_TOL: f64 = 1e-10;
const KRYLOV_MAX_ITERS: usize = 10_000;

// ---------------------------------------------------------------------------
// interior indexing

#[derive(Debug, Clone)]
pub(crate) struct InteriorMap {
    /// Flat grid indices of the interior points, ascending.
    pub list: Vec<usize>,
    /// Flat index -> interior index, or -1 on the boundary.
    pub of_flat: Vec<isize>,
}

impl InteriorMap {
    pub fn new(grid: &SpatialGrid) -> Self {
        let list = grid.interior();
        let mut of_flat = vec![-1isize; grid.len()];
        for (q, &flat) in list.iter().enumerate() {
            of_flat[flat] = q as isize;
        }
        InteriorMap { list, of_flat }
    }
}

/// Stencil neighbor offsets in flat indexing; entry 0 is the center.
pub(crate) fn offsets(grid: &SpatialGrid) -> Vec<isize> {
    let nx = grid.counts[0] as isize;
    if grid.dim == 1 {
        vec![0, -1, 1]
    } else {
        vec![0, -1, 1, -nx, nx, -nx - 1, -nx + 1, nx - 1, nx + 1]
    }
}

// ---------------------------------------------------------------------------
// per-node stencil cache

/// Rows of A and running-cost values for every control at every interior
/// point of one (node, time) slice.
pub(crate) struct ControlStencils {
    entries: Vec<f64>,
    phi: Vec<f64>,
    pub width: usize,
    pub n_controls: usize,
    pub n_interior: usize,
    pub monotone: bool,
}

impl ControlStencils {
    pub fn entries_at(&self, j: usize, q: usize) -> &[f64] {
        let base = (j * self.n_interior + q) * self.width;
        &self.entries[base..base + self.width]
    }

    pub fn phi_at(&self, j: usize, q: usize) -> f64 {
        self.phi[j * self.n_interior + q]
    }
}

/// Writes the row of A for one evaluation point into `entries`
/// (layout per `offsets`) and returns the running cost there.
fn point_stencil(
    problem: &ControlProblem,
    grid: &SpatialGrid,
    x: &[f64],
    v: &[f64],
    z: &[f64],
    t: f64,
    entries: &mut [f64],
) -> f64 {
    let ctx = EvalCtx { x, v, z, t };
    let c = &problem.coefficients;
    if grid.dim == 1 {
        let h = grid.spacing[0];
        let b = c.diffusion_at(&ctx, 0, 0);
        let f = (c.drift[0])(&ctx);
        entries[0] = -2.0 * b / (h * h) - f.abs() / h;
        entries[1] = b / (h * h) + (-f).max(0.0) / h;
        entries[2] = b / (h * h) + f.max(0.0) / h;
    } else {
        let (hx, hy) = (grid.spacing[0], grid.spacing[1]);
        let bxx = c.diffusion_at(&ctx, 0, 0);
        let byy = c.diffusion_at(&ctx, 1, 1);
        let bxy = 0.5 * (c.diffusion_at(&ctx, 0, 1) + c.diffusion_at(&ctx, 1, 0));
        let fx = (c.drift[0])(&ctx);
        let fy = (c.drift[1])(&ctx);
        let cross = bxy / (2.0 * hx * hy);
        entries[0] = -2.0 * bxx / (hx * hx) - 2.0 * byy / (hy * hy) - fx.abs() / hx - fy.abs() / hy;
        entries[1] = bxx / (hx * hx) + (-fx).max(0.0) / hx; // W
        entries[2] = bxx / (hx * hx) + fx.max(0.0) / hx; // E
        entries[3] = byy / (hy * hy) + (-fy).max(0.0) / hy; // S
        entries[4] = byy / (hy * hy) + fy.max(0.0) / hy; // N
        entries[5] = cross; // SW
        entries[6] = -cross; // SE
        entries[7] = -cross; // NW
        entries[8] = cross; // NE
    }
    c.cost_at(&ctx)
}

pub(crate) fn build_stencils(
    problem: &ControlProblem,
    grid: &SpatialGrid,
    imap: &InteriorMap,
    z: &[f64],
    t: f64,
) -> ControlStencils {
    let width = if grid.dim == 1 { 3 } else { 9 };
    let m = imap.list.len();
    let n_controls = problem.controls.len();
    let mut entries = vec![0.0; n_controls * m * width];
    let mut phi = vec![0.0; n_controls * m];
    let mut monotone = true;
    for (j, v) in problem.controls.points.iter().enumerate() {
        for (q, &flat) in imap.list.iter().enumerate() {
            let x = grid.point(flat);
            let base = (j * m + q) * width;
            phi[j * m + q] =
                point_stencil(problem, grid, &x[..grid.dim], v, z, t, &mut entries[base..base + width]);
            if grid.dim == 2 && entries[base + 5] != 0.0 {
                monotone = false;
            }
        }
    }
    ControlStencils { entries, phi, width, n_controls, n_interior: m, monotone }
}

// ---------------------------------------------------------------------------
// control choice: hard policy slice or pointwise relaxed measures

#[derive(Clone, Copy)]
pub(crate) enum ChoiceRef<'a> {
    Hard(&'a [u32]),
    Relaxed(&'a [RelaxedMeasure]),
}

impl<'a> ChoiceRef<'a> {
    /// Row of A at interior point q under this choice; relaxed measures
    /// average the per-control rows (stencil averaging).
    fn row(&self, st: &ControlStencils, flat: usize, q: usize, buf: &mut [f64]) {
        match self {
            ChoiceRef::Hard(policy) => {
                buf.copy_from_slice(st.entries_at(policy[flat] as usize, q));
            }
            ChoiceRef::Relaxed(measures) => {
                buf.iter_mut().for_each(|e| *e = 0.0);
                for (j, &w) in measures[flat].weights.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    for (e, s) in buf.iter_mut().zip(st.entries_at(j, q)) {
                        *e += w * s;
                    }
                }
            }
        }
    }

    fn phi(&self, st: &ControlStencils, flat: usize, q: usize) -> f64 {
        match self {
            ChoiceRef::Hard(policy) => st.phi_at(policy[flat] as usize, q),
            ChoiceRef::Relaxed(measures) => measures[flat]
                .weights
                .iter()
                .enumerate()
                .map(|(j, &w)| w * st.phi_at(j, q))
                .sum(),
        }
    }
}

pub(crate) enum Operator {
    Tri(Tridiag),
    Sparse(Csr),
}

impl Operator {
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        match self {
            Operator::Tri(t) => t.solve(rhs),
            Operator::Sparse(a) => Ok(bicgstab(a, rhs, KRYLOV_TOL, KRYLOV_MAX_ITERS)?.0),
        }
    }

    pub fn solve_transpose(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        match self {
            Operator::Tri(t) => t.solve_transpose(rhs),
            Operator::Sparse(a) => Ok(bicgstab(&a.transpose(), rhs, KRYLOV_TOL, KRYLOV_MAX_ITERS)?.0),
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Operator::Tri(t) => t.matvec(x),
            Operator::Sparse(a) => a.matvec(x),
        }
    }

    pub fn matvec_transpose(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Operator::Tri(t) => t.matvec_transpose(x),
            Operator::Sparse(a) => a.transpose().matvec(x),
        }
    }
}

/// Assembles I + scale * A on the interior under the given control choice.
/// Rows touching the boundary drop those neighbors (zero Dirichlet data).
pub(crate) fn assemble_operator(
    grid: &SpatialGrid,
    imap: &InteriorMap,
    st: &ControlStencils,
    choice: ChoiceRef,
    scale: f64,
) -> Operator {
    let offs = offsets(grid);
    let m = imap.list.len();
    let mut row = vec![0.0; st.width];
    if grid.dim == 1 {
        let mut t = Tridiag::zeros(m);
        for (q, &flat) in imap.list.iter().enumerate() {
            choice.row(st, flat, q, &mut row);
            t.diag[q] = 1.0 + scale * row[0];
            // interior neighbors are q-1 and q+1; boundary neighbors vanish
            if q > 0 {
                t.sub[q] = scale * row[1];
            }
            if q + 1 < m {
                t.sup[q] = scale * row[2];
            }
        }
        Operator::Tri(t)
    } else {
        let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(m);
        for (q, &flat) in imap.list.iter().enumerate() {
            choice.row(st, flat, q, &mut row);
            let mut r: Vec<(usize, f64)> = Vec::with_capacity(st.width);
            r.push((q, 1.0 + scale * row[0]));
            for (e, &off) in offs.iter().enumerate().skip(1) {
                let val = scale * row[e];
                if val == 0.0 {
                    continue;
                }
                let nf = (flat as isize + off) as usize;
                let nq = imap.of_flat[nf];
                if nq >= 0 {
                    r.push((nq as usize, val));
                }
            }
            rows.push(r);
        }
        Operator::Sparse(Csr::from_rows(rows))
    }
}

/// A V + phi at interior point q for control j, using a full-grid slice
/// (boundary values are multiplied in, so slices must respect V = 0 there).
pub(crate) fn apply_row(
    st: &ControlStencils,
    offs: &[isize],
    j: usize,
    q: usize,
    flat: usize,
    slice: &[f64],
) -> f64 {
    let row = st.entries_at(j, q);
    let mut acc = 0.0;
    for (e, &off) in offs.iter().enumerate() {
        acc += row[e] * slice[(flat as isize + off) as usize];
    }
    acc
}

/// Applies the generator of one control point to a full-grid slice;
/// returns a full-grid array, zero at boundary positions.
pub fn apply_generator(
    problem: &ControlProblem,
    grid: &SpatialGrid,
    slice: &[f64],
    v: &[f64],
    z: &[f64],
    t: f64,
) -> Vec<f64> {
    let offs = offsets(grid);
    let width = offs.len();
    let mut entries = vec![0.0; width];
    let mut out = vec![0.0; grid.len()];
    for flat in 0..grid.len() {
        if grid.is_boundary(flat) {
            continue;
        }
        let x = grid.point(flat);
        point_stencil(problem, grid, &x[..grid.dim], v, z, t, &mut entries);
        let mut acc = 0.0;
        for (e, &off) in offs.iter().enumerate() {
            acc += entries[e] * slice[(flat as isize + off) as usize];
        }
        out[flat] = acc;
    }
    out
}

// ---------------------------------------------------------------------------
// theta-scheme sweeps

/// Largest stable dt for the explicit part of the scheme, from the declared
/// diffusion bound: dt <= h^2 / (2 n sup|b|), scaled by 1/(1-theta).
pub fn explicit_stability_bound(problem: &ControlProblem, grid: &SpatialGrid, theta: f64) -> Option<f64> {
    if theta >= 1.0 {
        return None;
    }
    let sup_b = problem.coefficients.diffusion_bound;
    let inv_h2: f64 = (0..grid.dim).map(|ax| 1.0 / (grid.spacing[ax] * grid.spacing[ax])).sum();
    Some(1.0 / ((1.0 - theta) * 2.0 * sup_b * inv_h2))
}

fn check_theta(theta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&theta) {
        return Err(BhjbError::Config(format!("theta must lie in [0, 1], got {theta}")));
    }
    Ok(())
}

pub(crate) fn check_stability(
    problem: &ControlProblem,
    grid: &SpatialGrid,
    theta: f64,
    dt: f64,
) -> Result<()> {
    if let Some(bound) = explicit_stability_bound(problem, grid, theta) {
        if dt > bound * (1.0 + 1e-12) {
            return Err(BhjbError::Numerical(format!(
                "explicit scheme unstable: dt = {dt:.6e} exceeds the stability bound {bound:.6e}"
            )));
        }
    }
    Ok(())
}

fn check_compat(
    problem: &ValidatedProblem,
    tree: &ValidatedTree,
    grid: &SpatialGrid,
) -> Result<()> {
    if !problem.matches_grid(grid) {
        return Err(BhjbError::Dimension(
            "problem was validated against a different grid".into(),
        ));
    }
    if (tree.times[tree.depth()] - problem.horizon).abs() > 1e-12 {
        return Err(BhjbError::Config(format!(
            "tree horizon {} does not match problem horizon {}",
            tree.times[tree.depth()],
            problem.horizon
        )));
    }
    if tree.z_dim() != problem.z_dim {
        return Err(BhjbError::Dimension(format!(
            "tree z-dimension {} does not match problem z-dimension {}",
            tree.z_dim(),
            problem.z_dim
        )));
    }
    Ok(())
}

/// What enters the right-hand side as the dt-weighted source term.
pub(crate) enum StepSource<'a> {
    /// Running cost of the control choice.
    Phi,
    /// No source (adjoint solves with terminal data only).
    Zero,
    /// Precomputed per-interior-point values.
    Values(&'a [f64]),
}

/// One theta-step at a single node: solves M v = B w + dt * source on the
/// interior and scatters into a full slice with zero boundary.  Both the
/// fixed-control sweep and the policy-iteration solver route through here,
/// so a frozen-policy recomputation reproduces the solver bitwise.
pub(crate) fn implicit_step(
    grid: &SpatialGrid,
    imap: &InteriorMap,
    st: &ControlStencils,
    choice: ChoiceRef,
    theta: f64,
    dt: f64,
    w_full: &[f64],
    source: StepSource,
) -> Result<Vec<f64>> {
    let m = imap.list.len();
    let mut rhs = vec![0.0; m];
    if theta < 1.0 {
        let b_op = assemble_operator(grid, imap, st, choice, (1.0 - theta) * dt);
        let w_int: Vec<f64> = imap.list.iter().map(|&f| w_full[f]).collect();
        rhs = b_op.matvec(&w_int);
    } else {
        for (q, &flat) in imap.list.iter().enumerate() {
            rhs[q] = w_full[flat];
        }
    }
    match source {
        StepSource::Phi => {
            for (q, &flat) in imap.list.iter().enumerate() {
                rhs[q] += dt * choice.phi(st, flat, q);
            }
        }
        StepSource::Values(vals) => {
            for (q, v) in rhs.iter_mut().zip(vals) {
                *q += dt * v;
            }
        }
        StepSource::Zero => {}
    }
    let v_int = if theta > 0.0 {
        let m_op = assemble_operator(grid, imap, st, choice, -theta * dt);
        m_op.solve(&rhs)?
    } else {
        rhs
    };
    let mut slice = vec![0.0; grid.len()];
    for (q, &flat) in imap.list.iter().enumerate() {
        slice[flat] = v_int[q];
    }
    Ok(slice)
}

/// Internal backward sweep shared by the fixed-control solver and the
/// adjoint tests: optional terminal data on the leaves and optional source
/// override (a function of (x, t) replacing the running cost).
pub(crate) fn backward_sweep<'a, C>(
    problem: &ValidatedProblem,
    tree: &ValidatedTree,
    grid: &SpatialGrid,
    theta: f64,
    choice_of_node: C,
    terminal: Option<&(dyn Fn(usize) -> Vec<f64> + Sync)>,
    source: SourceKind,
) -> Result<ValueField>
where
    C: Fn(usize) -> ChoiceRef<'a> + Sync,
{
    check_theta(theta)?;
    check_compat(problem, tree, grid)?;
    let imap = InteriorMap::new(grid);
    let depth = tree.depth();
    let mut field = ValueField::zeros(tree, grid, theta, &problem.id);
    if let Some(term) = terminal {
        for &leaf in &tree.levels[depth] {
            let mut slice = term(leaf);
            if slice.len() != grid.len() {
                return Err(BhjbError::Dimension("terminal slice length mismatch".into()));
            }
            for flat in 0..grid.len() {
                if grid.is_boundary(flat) {
                    slice[flat] = 0.0;
                }
            }
            field.data.values[leaf] = slice;
        }
    }

    for k in (0..depth).rev() {
        let dt = tree.dt(k);
        check_stability(problem, grid, theta, dt)?;
        let t = tree.times[k];
        let psi_vals: Option<Vec<f64>> = match &source {
            SourceKind::Override(psi) => Some(
                imap.list
                    .iter()
                    .map(|&flat| {
                        let x = grid.point(flat);
                        psi(&x[..grid.dim], t)
                    })
                    .collect(),
            ),
            _ => None,
        };
        let updated: Result<Vec<(usize, Vec<f64>)>> = tree.levels[k]
            .par_iter()
            .map(|&n| {
                let w_full = conditional_expectation(tree, &field.data, n)?;
                let st = build_stencils(problem, grid, &imap, &tree.nodes[n].z, t);
                let choice = choice_of_node(n);
                let step_source = match &source {
                    SourceKind::RunningCost => StepSource::Phi,
                    SourceKind::None => StepSource::Zero,
                    SourceKind::Override(_) => StepSource::Values(psi_vals.as_ref().unwrap()),
                };
                let slice =
                    implicit_step(grid, &imap, &st, choice, theta, dt, &w_full, step_source)?;
                Ok((n, slice))
            })
            .collect();
        for (n, slice) in updated? {
            field.data.values[n] = slice;
        }
    }
    Ok(field)
}

pub(crate) enum SourceKind<'a> {
    RunningCost,
    None,
    Override(&'a (dyn Fn(&[f64], f64) -> f64 + Sync)),
}

/// Backward parabolic solve under a fixed feedback policy: zero terminal
/// and boundary data, running cost as the source.
pub fn solve_backward_fixed_control(
    problem: &ValidatedProblem,
    tree: &ValidatedTree,
    grid: &SpatialGrid,
    policy: &PolicyField,
    theta: f64,
) -> Result<ValueField> {
    policy.validate(tree, grid)?;
    backward_sweep(
        problem,
        tree,
        grid,
        theta,
        |n| ChoiceRef::Hard(&policy.data.values[n]),
        None,
        SourceKind::RunningCost,
    )
}

/// Backward solve with terminal data psi and no source; used by the
/// adjoint-consistency checks.
pub fn solve_backward_terminal(
    problem: &ValidatedProblem,
    tree: &ValidatedTree,
    grid: &SpatialGrid,
    policy: &PolicyField,
    theta: f64,
    psi: &(dyn Fn(&[f64]) -> f64 + Sync),
) -> Result<ValueField> {
    policy.validate(tree, grid)?;
    let terminal = move |_leaf: usize| -> Vec<f64> {
        (0..grid.len()).map(|f| psi(&grid.point(f)[..grid.dim])).collect()
    };
    backward_sweep(
        problem,
        tree,
        grid,
        theta,
        |n| ChoiceRef::Hard(&policy.data.values[n]),
        Some(&terminal),
        SourceKind::None,
    )
}

// ---------------------------------------------------------------------------
// initial law and pairings

/// Full-grid density slice realizing the initial law.  A Dirac point mass
/// becomes a single-cell histogram: all mass in the nearest dual cell.
pub fn initial_density_slice(rho: &InitialLaw, grid: &SpatialGrid) -> Result<Vec<f64>> {
    match rho {
        InitialLaw::GridDensity { values } => {
            if values.len() != grid.len() {
                return Err(BhjbError::Dimension(format!(
                    "initial density has {} values for {} grid nodes",
                    values.len(),
                    grid.len()
                )));
            }
            Ok(values.clone())
        }
        InitialLaw::Dirac { point } => {
            let cell = grid.nearest(point);
            let mut slice = vec![0.0; grid.len()];
            slice[cell] = 1.0 / grid.quad_weight(cell);
            Ok(slice)
        }
    }
}

/// <rho, V(., 0)> at the root: quadrature pairing for grid densities,
/// multilinear interpolation for a Dirac initial law.
pub fn pair_initial(
    rho: &InitialLaw,
    grid: &SpatialGrid,
    tree: &crate::tree::ScenarioTree,
    field: &ValueField,
) -> Result<f64> {
    let slice = &field.data.values[tree.root()];
    match rho {
        InitialLaw::GridDensity { values } => {
            if values.len() != grid.len() {
                return Err(BhjbError::Dimension("initial density length mismatch".into()));
            }
            Ok(kahan_sum(
                (0..grid.len()).map(|f| grid.quad_weight(f) * values[f] * slice[f]),
            ))
        }
        InitialLaw::Dirac { point } => {
            let weights = grid.interp_weights(point)?;
            Ok(weights.iter().map(|&(f, w)| w * slice[f]).sum())
        }
    }
}

// ---------------------------------------------------------------------------
// forward sweep

struct ForwardOutput {
    field: DensityField,
    pairing: f64,
}

fn forward_sweep<'a, C>(
    problem: &ValidatedProblem,
    tree: &ValidatedTree,
    grid: &SpatialGrid,
    theta: f64,
    choice_of_node: C,
    rho: &InitialLaw,
) -> Result<ForwardOutput>
where
    C: Fn(usize) -> ChoiceRef<'a> + Sync,
{
    check_theta(theta)?;
    check_compat(problem, tree, grid)?;
    let imap = InteriorMap::new(grid);
    let w_int = grid.interior_weight();
    let depth = tree.depth();
    let mut field = DensityField {
        data: crate::tree::NodeIndexed { values: vec![Vec::new(); tree.nodes.len()] },
        theta,
        problem_id: problem.id.clone(),
    };
    field.data.values[tree.root()] = initial_density_slice(rho, grid)?;

    let mut pairing = 0.0;
    for k in 0..depth {
        let dt = tree.dt(k);
        check_stability(problem, grid, theta, dt)?;
        let t = tree.times[k];
        let stepped: Result<Vec<(usize, Vec<f64>, f64)>> = tree.levels[k]
            .par_iter()
            .map(|&n| {
                let slice = &field.data.values[n];
                let p_int: Vec<f64> = imap.list.iter().map(|&f| slice[f]).collect();
                let st = build_stencils(problem, grid, &imap, &tree.nodes[n].z, t);
                let choice = choice_of_node(n);
                // m = M^{-T} p: the density the running cost pairs with
                let m_vec = if theta > 0.0 {
                    let m_op = assemble_operator(grid, &imap, &st, choice, -theta * dt);
                    m_op.solve_transpose(&p_int)?
                } else {
                    p_int
                };
                let phi_int: Vec<f64> =
                    (0..imap.list.len()).map(|q| choice.phi(&st, imap.list[q], q)).collect();
                let contrib = dt
                    * tree.path_probs[n]
                    * w_int
                    * kahan_sum(m_vec.iter().zip(&phi_int).map(|(m, p)| m * p));
                let q_next = if theta < 1.0 {
                    let b_op = assemble_operator(grid, &imap, &st, choice, (1.0 - theta) * dt);
                    b_op.matvec_transpose(&m_vec)
                } else {
                    m_vec
                };
                let mut full = vec![0.0; grid.len()];
                for (q, &flat) in imap.list.iter().enumerate() {
                    full[flat] = q_next[q];
                }
                Ok((n, full, contrib))
            })
            .collect();
        for (n, end_slice, contrib) in stepped? {
            pairing += contrib;
            // branching copies the end-of-step density to every child
            let children = tree.nodes[n].children.clone();
            if let Some((&last, rest)) = children.split_last() {
                for &c in rest {
                    field.data.values[c] = end_slice.clone();
                }
                field.data.values[last] = end_slice;
            }
        }
    }
    Ok(ForwardOutput { field, pairing })
}

/// Forward Kolmogorov propagation of the killed conditional density under a
/// fixed policy, using the discrete adjoint of the backward operator.
pub fn solve_forward_kolmogorov(
    problem: &ValidatedProblem,
    tree: &ValidatedTree,
    grid: &SpatialGrid,
    policy: &PolicyField,
    rho: &InitialLaw,
    theta: f64,
) -> Result<DensityField> {
    policy.validate(tree, grid)?;
    Ok(forward_sweep(problem, tree, grid, theta, |n| ChoiceRef::Hard(&policy.data.values[n]), rho)?
        .field)
}

/// Forward propagation under a relaxed (pointwise-measure) policy; rows of
/// the generator are averaged per point, matching the chattering identity.
pub fn solve_forward_relaxed(
    problem: &ValidatedProblem,
    tree: &ValidatedTree,
    grid: &SpatialGrid,
    relaxed: &RelaxedPolicyField,
    rho: &InitialLaw,
    theta: f64,
) -> Result<DensityField> {
    Ok(forward_sweep(problem, tree, grid, theta, |n| ChoiceRef::Relaxed(&relaxed.data.values[n]), rho)?
        .field)
}

/// Cost functional evaluated through the forward densities:
/// sum_k dt_k sum_n P(n) <phi_k^n, m_k^n>.  Equals
/// `pair_initial(rho, solve_backward_fixed_control(...))` to solver
/// precision on matched discretizations.
pub fn duality_cost(
    problem: &ValidatedProblem,
    tree: &ValidatedTree,
    grid: &SpatialGrid,
    policy: &PolicyField,
    rho: &InitialLaw,
    theta: f64,
) -> Result<f64> {
    policy.validate(tree, grid)?;
    Ok(forward_sweep(problem, tree, grid, theta, |n| ChoiceRef::Hard(&policy.data.values[n]), rho)?
        .pairing)
}

/// Same pairing under a relaxed policy.
pub fn duality_cost_relaxed(
    problem: &ValidatedProblem,
    tree: &ValidatedTree,
    grid: &SpatialGrid,
    relaxed: &RelaxedPolicyField,
    rho: &InitialLaw,
    theta: f64,
) -> Result<f64> {
    Ok(forward_sweep(problem, tree, grid, theta, |n| ChoiceRef::Relaxed(&relaxed.data.values[n]), rho)?
        .pairing)
}

// ---------------------------------------------------------------------------
// Condition 1 probe

/// Empirical regularity diagnostic: for each source psi, solves the
/// backward problem with source psi and reports the discrete ratio
/// (|dV/dt|^2 + |V|_{H2}^2) / |psi|^2 over the space-time-tree measure.
/// Growth of the ratio under refinement signals a Condition 1 failure;
/// no constant is estimated.
pub fn condition1_bound_probe(
    problem: &ValidatedProblem,
    tree: &ValidatedTree,
    grid: &SpatialGrid,
    policy: &PolicyField,
    psis: &[&(dyn Fn(&[f64], f64) -> f64 + Sync)],
    theta: f64,
) -> Result<Vec<f64>> {
    policy.validate(tree, grid)?;
    let imap = InteriorMap::new(grid);
    let w_int = grid.interior_weight();
    let depth = tree.depth();
    let mut ratios = Vec::with_capacity(psis.len());
    for psi in psis {
        let field = backward_sweep(
            problem,
            tree,
            grid,
            theta,
            |n| ChoiceRef::Hard(&policy.data.values[n]),
            None,
            SourceKind::Override(*psi),
        )?;
        let mut num = 0.0;
        let mut den = 0.0;
        for k in 0..depth {
            let dt = tree.dt(k);
            let t = tree.times[k];
            for &n in &tree.levels[k] {
                let p = tree.path_probs[n];
                let slice = &field.data.values[n];
                let w_full = conditional_expectation(tree, &field.data, n)?;
                let mut dv_dt = 0.0;
                let mut h2 = 0.0;
                let mut src = 0.0;
                for &flat in &imap.list {
                    let x = grid.point(flat);
                    let dvdt = (w_full[flat] - slice[flat]) / dt;
                    dv_dt += dvdt * dvdt;
                    let mut grad2 = 0.0;
                    let mut d2 = 0.0;
                    let v0 = slice[flat];
                    for ax in 0..grid.dim {
                        let off = if ax == 0 { 1isize } else { grid.counts[0] as isize };
                        let h = grid.spacing[ax];
                        let vp = slice[(flat as isize + off) as usize];
                        let vm = slice[(flat as isize - off) as usize];
                        let g = (vp - vm) / (2.0 * h);
                        grad2 += g * g;
                        let s = (vp - 2.0 * v0 + vm) / (h * h);
                        d2 += s * s;
                    }
                    if grid.dim == 2 {
                        let nx = grid.counts[0] as isize;
                        let mixed = (slice[(flat as isize + nx + 1) as usize]
                            - slice[(flat as isize + nx - 1) as usize]
                            - slice[(flat as isize - nx + 1) as usize]
                            + slice[(flat as isize - nx - 1) as usize])
                            / (4.0 * grid.spacing[0] * grid.spacing[1]);
                        d2 += 2.0 * mixed * mixed;
                    }
                    h2 += v0 * v0 + grad2 + d2;
                    let s = psi(&x[..grid.dim], t);
                    src += s * s;
                }
                num += dt * p * w_int * (dv_dt + h2);
                den += dt * p * w_int * src;
            }
        }
        ratios.push(if den > 0.0 { num / den } else { 0.0 });
    }
    Ok(ratios)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::SpatialGrid;
    use crate::problem::{
        coef, const_coef, CoefficientField, ControlProblem, ControlSet, InitialLaw, SpatialDomain,
        ValidatedProblem,
    };
    use crate::tree::{chain_tree, ValidatedTree};

    pub(crate) fn problem_1d(
        b: f64,
        f: crate::problem::ScalarCoef,
        phi: crate::problem::ScalarCoef,
        horizon: f64,
        controls: Vec<Vec<f64>>,
        law: InitialLaw,
    ) -> ControlProblem {
        ControlProblem {
            id: "pde-test".into(),
            domain: SpatialDomain::bounded(vec![0.0], vec![1.0]).unwrap(),
            horizon,
            coefficients: CoefficientField {
                drift: vec![f],
                diffusion: vec![vec![const_coef(b)]],
                running_cost: phi,
                drift_bound: 10.0,
                diffusion_bound: b.abs().max(1.0),
                cost_bound: 100.0,
            },
            controls: ControlSet::new(controls).unwrap(),
            initial_law: law,
            z_dim: 1,
            z_hints: vec![vec![0.0]],
        }
    }

    fn setup(
        nx: usize,
        k: usize,
        horizon: f64,
        b: f64,
        f: crate::problem::ScalarCoef,
        phi: crate::problem::ScalarCoef,
    ) -> (ValidatedProblem, ValidatedTree, SpatialGrid, PolicyField) {
        let domain = SpatialDomain::bounded(vec![0.0], vec![1.0]).unwrap();
        let grid = SpatialGrid::new(&domain, &[nx]).unwrap();
        let law = InitialLaw::uniform(&grid, &domain);
        let problem = problem_1d(b, f, phi, horizon, vec![vec![0.0]], law);
        let problem = ValidatedProblem::new(problem, &grid, 64).unwrap();
        let times: Vec<f64> = (0..=k).map(|i| horizon * i as f64 / k as f64).collect();
        let tree = ValidatedTree::new(chain_tree(times, vec![vec![0.0]; k + 1]).unwrap()).unwrap();
        let policy = PolicyField::constant(&tree, &grid, 1, 0);
        (problem, tree, grid, policy)
    }

    #[test]
    fn generator_is_exact_on_low_order_polynomials() {
        let (problem, _, grid, _) = setup(21, 2, 1.0, 1.0, const_coef(2.0), const_coef(0.0));
        // constant slice: A const = 0 (no zero-order term)
        let ones = vec![1.0; grid.len()];
        let out = apply_generator(&problem, &grid, &ones, &[0.0], &[0.0], 0.0);
        for &flat in &grid.interior() {
            assert!(out[flat].abs() < 1e-12);
        }
        // V = x with f = 2: A V = 2 at interior points (boundary rows excluded)
        let linear: Vec<f64> = (0..grid.len()).map(|i| grid.point(i)[0]).collect();
        let out = apply_generator(&problem, &grid, &linear, &[0.0], &[0.0], 0.0);
        for &flat in &grid.interior() {
            assert!((out[flat] - 2.0).abs() < 1e-10, "at {flat}: {}", out[flat]);
        }
        // V = x^2 with b = 1, f = 0: A V = 2 exactly
        let (problem, _, grid, _) = setup(21, 2, 1.0, 1.0, const_coef(0.0), const_coef(0.0));
        let quad: Vec<f64> = (0..grid.len()).map(|i| grid.point(i)[0].powi(2)).collect();
        let out = apply_generator(&problem, &grid, &quad, &[0.0], &[0.0], 0.0);
        for &flat in &grid.interior() {
            assert!((out[flat] - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_cost_gives_zero_value() {
        let (problem, tree, grid, policy) = setup(31, 8, 1.0, 0.5, const_coef(0.0), const_coef(0.0));
        let v = solve_backward_fixed_control(&problem, &tree, &grid, &policy, 1.0).unwrap();
        assert_eq!(v.min_value(), 0.0);
        assert!(v.data.values.iter().all(|s| s.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn exit_time_solve_matches_analytic_solution() {
        // b = 1/2, f = 0, phi = 1, T = 5: V(x, 0) -> x(1-x)
        let (problem, tree, grid, policy) = setup(200, 50, 5.0, 0.5, const_coef(0.0), const_coef(1.0));
        let v = solve_backward_fixed_control(&problem, &tree, &grid, &policy, 1.0).unwrap();
        let root = &v.data.values[tree.root()];
        for &flat in &grid.interior() {
            let x = grid.point(flat)[0];
            assert!((root[flat] - x * (1.0 - x)).abs() < 2e-4, "x = {x}");
        }
        let mid = pair_initial(&InitialLaw::Dirac { point: vec![0.5] }, &grid, &tree, &v).unwrap();
        assert!((mid - 0.25).abs() < 2e-3);
        let value = pair_initial(&problem.initial_law, &grid, &tree, &v).unwrap();
        assert!((value - 1.0 / 6.0).abs() < 2e-3, "value = {value}");
    }

    #[test]
    fn explicit_scheme_refuses_unstable_steps() {
        let (problem, tree, grid, policy) = setup(50, 4, 1.0, 0.5, const_coef(0.0), const_coef(1.0));
        // dt = 0.25 with h ~ 0.02: far beyond h^2 / (2 sup b)
        let err = solve_backward_fixed_control(&problem, &tree, &grid, &policy, 0.0).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("stability bound"), "{msg}");
        // a fine enough time grid runs
        let bound = explicit_stability_bound(&problem, &grid, 0.0).unwrap();
        let k = (1.0 / bound).ceil() as usize + 1;
        let times: Vec<f64> = (0..=k).map(|i| i as f64 / k as f64).collect();
        let tree = ValidatedTree::new(chain_tree(times, vec![vec![0.0]; k + 1]).unwrap()).unwrap();
        let policy = PolicyField::constant(&tree, &grid, 1, 0);
        let v = solve_backward_fixed_control(&problem, &tree, &grid, &policy, 0.0).unwrap();
        assert!(v.min_value() >= -1e-12);
    }

    #[test]
    fn forward_density_is_symmetric_and_mass_non_increasing() {
        let (problem, tree, grid, policy) = setup(41, 10, 1.0, 0.5, const_coef(0.0), const_coef(1.0));
        let p = solve_forward_kolmogorov(&problem, &tree, &grid, &policy, &problem.initial_law, 1.0)
            .unwrap();
        let nx = grid.counts[0];
        let mut prev_mass = f64::INFINITY;
        for k in 0..=tree.depth() {
            let node = tree.levels[k][0];
            let slice = &p.data.values[node];
            for i in 0..nx {
                let j = nx - 1 - i;
                assert!((slice[i] - slice[j]).abs() < 1e-10, "level {k}");
            }
            let mass = p.mass(&grid, node);
            assert!(mass <= prev_mass + 1e-12);
            prev_mass = mass;
            if k == 0 {
                assert!((mass - 1.0).abs() < 1e-8);
            }
            if k >= 1 {
                for &flat in &grid.interior() {
                    assert!(slice[flat] > 0.0, "interior positivity at level {k}");
                }
            }
        }
    }

    #[test]
    fn duality_pairing_matches_backward_value() {
        // drift breaks symmetry on purpose; identity must hold exactly.
        // The theta = 0.5 run keeps dt below the explicit stability bound
        // (coarse grid, fine time), the implicit run uses a finer grid.
        for &(theta, nx, steps) in &[(1.0, 35usize, 7usize), (0.5, 12, 170)] {
            let f = coef(|c: &EvalCtx| 0.8 * (3.0 * c.x[0]).sin());
            let phi = coef(|c: &EvalCtx| 1.0 + 0.5 * c.x[0] + 0.2 * (c.t * 2.0).cos());
            let (problem, tree, grid, policy) = setup(nx, steps, 1.3, 0.4, f, phi);
            let v = solve_backward_fixed_control(&problem, &tree, &grid, &policy, theta).unwrap();
            let lhs = pair_initial(&problem.initial_law, &grid, &tree, &v).unwrap();
            let rhs =
                duality_cost(&problem, &tree, &grid, &policy, &problem.initial_law, theta).unwrap();
            assert!(
                (lhs - rhs).abs() < 1e-12,
                "theta {theta}: pairing {lhs} vs duality sum {rhs}"
            );
        }
    }

    #[test]
    fn pair_initial_examples() {
        let (problem, tree, grid, _) = setup(101, 2, 1.0, 0.5, const_coef(0.0), const_coef(1.0));
        let mut v = ValueField::zeros(&tree, &grid, 1.0, "t");
        assert_eq!(pair_initial(&problem.initial_law, &grid, &tree, &v).unwrap(), 0.0);
        let root = tree.root();
        for flat in 0..grid.len() {
            let x = grid.point(flat)[0];
            v.data.values[root][flat] = x * (1.0 - x);
        }
        let uniform = pair_initial(&problem.initial_law, &grid, &tree, &v).unwrap();
        assert!((uniform - 1.0 / 6.0).abs() < 1e-4);
        let dirac = pair_initial(&InitialLaw::Dirac { point: vec![0.5] }, &grid, &tree, &v).unwrap();
        assert!((dirac - 0.25).abs() < 1e-9);
        assert!(pair_initial(&InitialLaw::Dirac { point: vec![7.0] }, &grid, &tree, &v).is_err());
    }

    #[test]
    fn condition1_ratio_stable_under_refinement_for_constant_b() {
        let psi = |x: &[f64], t: f64| (2.0 * x[0] - t).sin() + 1.2;
        let mut ratios = Vec::new();
        for &(nx, k) in &[(21usize, 8usize), (41, 16), (81, 32)] {
            let (problem, tree, grid, policy) =
                setup(nx, k, 1.0, 0.5, const_coef(0.0), const_coef(0.0));
            let r = condition1_bound_probe(&problem, &tree, &grid, &policy, &[&psi], 1.0).unwrap();
            ratios.push(r[0]);
        }
        let lo = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ratios.iter().cloned().fold(0.0f64, f64::max);
        assert!(hi / lo < 2.0, "ratios {ratios:?}");
        // zero source: ratio defined as 0
        let (problem, tree, grid, policy) = setup(21, 4, 1.0, 0.5, const_coef(0.0), const_coef(0.0));
        let zero = |_: &[f64], _: f64| 0.0;
        let r = condition1_bound_probe(&problem, &tree, &grid, &policy, &[&zero], 1.0).unwrap();
        assert_eq!(r[0], 0.0);
    }
}
