//! Built-in example problems
//!
//! Each preset bundles a problem config, a scenario tree, grid counts and
//! pinned scheme/simulation settings, so the acceptance checks are one
//! command each.  Presets are registered as boxed builders behind a name
//! lookup; `dim-reduction(N)` parses its latent dimension out of the name.
//!
//! * `exit-time`: D = (0,1), b = 1/2, f = 0, phi = 1, T = 5, trivial
//!   one-chain tree.  The value solves (1/2) u'' = -1, u(0) = u(1) = 0,
//!   so V(x, 0) tends to x(1-x) for large T.
//! * `bang-bang`: f = v with v in {-1, +1}, phi = 1: the optimal drift
//!   pushes toward the nearest boundary, u(x) = -sign(V_x).
//! * `bounded-bhat`: diffusion 1 + 0.3 v depends on the control but the
//!   perturbation is small; the case-ii certification passes.
//! * `two-branch-Z`: control-free drift z(1 - 2x) whose sign flips with z
//!   at T/2 over one branching; the cost carries the control so the
//!   optimal policy exists but never feeds back into the branch coupling.
//! * `dim-reduction(N)`: a binary tree of fixed depth whose z values come
//!   from pre-simulating an N-dimensional Ornstein-Uhlenbeck process
//!   offline and projecting z = mean(X); everything the solver touches is
//!   independent of N.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{
    BoundsConfig, CordesConfig, DomainConfig, GridConfig, LawConfig, ProblemConfig, SchemeConfig,
    SimConfig,
};
use crate::error::{BhjbError, Result};
use crate::tree::{chain_tree, ScenarioTree};

pub struct PresetBundle {
    pub name: String,
    pub problem: ProblemConfig,
    pub tree: ScenarioTree,
    pub grid: GridConfig,
    pub scheme: SchemeConfig,
    pub simulation: SimConfig,
    pub cordes: CordesConfig,
}

fn uniform_times(horizon: f64, steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| horizon * i as f64 / steps as f64).collect()
}

fn exit_time() -> Result<PresetBundle> {
    let steps = 50;
    let tree = chain_tree(uniform_times(5.0, steps), vec![vec![0.0]; steps + 1])?;
    Ok(PresetBundle {
        name: "exit-time".into(),
        problem: ProblemConfig {
            id: "exit-time".into(),
            domain: DomainConfig {
                lower: vec![0.0],
                upper: vec![1.0],
                truncated_from_unbounded: false,
            },
            horizon: 5.0,
            drift: vec!["0".into()],
            diffusion: vec![vec!["0.5".into()]],
            running_cost: "1".into(),
            bounds: BoundsConfig { drift: 1.0, diffusion: 0.5, cost: 1.0 },
            controls: vec![vec![0.0]],
            initial_law: LawConfig::Uniform,
            z_dim: 1,
            z_hints: vec![vec![0.0]],
        },
        tree,
        grid: GridConfig { counts: vec![200] },
        scheme: SchemeConfig::default(),
        simulation: SimConfig { n_paths: 100_000, substeps: 4, seed: 42 },
        cordes: CordesConfig::default(),
    })
}

fn bang_bang() -> Result<PresetBundle> {
    let steps = 25;
    let tree = chain_tree(uniform_times(1.0, steps), vec![vec![0.0]; steps + 1])?;
    Ok(PresetBundle {
        name: "bang-bang".into(),
        problem: ProblemConfig {
            id: "bang-bang".into(),
            domain: DomainConfig {
                lower: vec![0.0],
                upper: vec![1.0],
                truncated_from_unbounded: false,
            },
            horizon: 1.0,
            drift: vec!["v".into()],
            diffusion: vec![vec!["0.5".into()]],
            running_cost: "1".into(),
            bounds: BoundsConfig { drift: 1.0, diffusion: 0.5, cost: 1.0 },
            controls: vec![vec![-1.0], vec![1.0]],
            initial_law: LawConfig::Uniform,
            z_dim: 1,
            z_hints: vec![vec![0.0]],
        },
        tree,
        grid: GridConfig { counts: vec![201] },
        scheme: SchemeConfig::default(),
        simulation: SimConfig { n_paths: 100_000, substeps: 4, seed: 42 },
        cordes: CordesConfig::default(),
    })
}

fn bounded_bhat() -> Result<PresetBundle> {
    let steps = 10;
    let tree = chain_tree(uniform_times(1.0, steps), vec![vec![0.0]; steps + 1])?;
    Ok(PresetBundle {
        name: "bounded-bhat".into(),
        problem: ProblemConfig {
            id: "bounded-bhat".into(),
            domain: DomainConfig {
                lower: vec![0.0],
                upper: vec![1.0],
                truncated_from_unbounded: false,
            },
            horizon: 1.0,
            drift: vec!["0".into()],
            diffusion: vec![vec!["1 + 0.3*v".into()]],
            running_cost: "1".into(),
            bounds: BoundsConfig { drift: 1.0, diffusion: 1.3, cost: 1.0 },
            controls: vec![vec![-1.0], vec![1.0]],
            initial_law: LawConfig::Uniform,
            z_dim: 1,
            z_hints: vec![vec![0.0]],
        },
        tree,
        grid: GridConfig { counts: vec![101] },
        scheme: SchemeConfig::default(),
        simulation: SimConfig { n_paths: 20_000, substeps: 4, seed: 42 },
        cordes: CordesConfig::default(),
    })
}

/// One branching at T/2: z = +1 on the trunk, then +1 or -1 with equal
/// probability.  The drift never sees the control and the cost's argmin
/// never sees z or the value slice, so the backward map is affine and the
/// root slice is exactly the branch average.
fn two_branch_z() -> Result<PresetBundle> {
    let steps = 16usize;
    let half = steps / 2;
    let times = uniform_times(1.0, steps);
    let mut records: Vec<(u64, usize, Vec<f64>, Option<u64>, f64)> = Vec::new();
    let mut next_id = 0u64;
    let mut up_tail = 0u64;
    let mut down_tail = 0u64;
    for k in 0..=steps {
        if k <= half {
            let parent = if k == 0 { None } else { Some(next_id - 1) };
            records.push((next_id, k, vec![1.0], parent, 1.0));
            up_tail = next_id;
            next_id += 1;
        } else if k == half + 1 {
            records.push((next_id, k, vec![1.0], Some(up_tail), 0.5));
            records.push((next_id + 1, k, vec![-1.0], Some(up_tail), 0.5));
            up_tail = next_id;
            down_tail = next_id + 1;
            next_id += 2;
        } else {
            records.push((next_id, k, vec![1.0], Some(up_tail), 1.0));
            records.push((next_id + 1, k, vec![-1.0], Some(down_tail), 1.0));
            up_tail = next_id;
            down_tail = next_id + 1;
            next_id += 2;
        }
    }
    let tree = ScenarioTree::from_records(times, records)?;
    Ok(PresetBundle {
        name: "two-branch-Z".into(),
        problem: ProblemConfig {
            id: "two-branch-Z".into(),
            domain: DomainConfig {
                lower: vec![0.0],
                upper: vec![1.0],
                truncated_from_unbounded: false,
            },
            horizon: 1.0,
            drift: vec!["z * (1 - 2*x)".into()],
            diffusion: vec![vec!["0.5".into()]],
            running_cost: "1 + 0.3*v*sin(2*pi*x)".into(),
            bounds: BoundsConfig { drift: 1.0, diffusion: 0.5, cost: 1.3 },
            controls: vec![vec![-1.0], vec![1.0]],
            initial_law: LawConfig::Uniform,
            z_dim: 1,
            z_hints: vec![vec![1.0], vec![-1.0]],
        },
        tree,
        grid: GridConfig { counts: vec![101] },
        scheme: SchemeConfig::default(),
        simulation: SimConfig { n_paths: 20_000, substeps: 4, seed: 42 },
        cordes: CordesConfig::default(),
    })
}

/// Latent dimension of the observable-process demo; the tree's shape and
/// the solve never depend on it.
const DIM_REDUCTION_DEPTH: usize = 10;

fn dim_reduction(latent_n: usize) -> Result<PresetBundle> {
    if latent_n == 0 {
        return Err(BhjbError::Config("dim-reduction needs a latent dimension >= 1".into()));
    }
    let steps = DIM_REDUCTION_DEPTH;
    let times = uniform_times(1.0, steps);
    let dt = 1.0 / steps as f64;

    // offline pre-simulation: dX = -X dt + dW in R^N from X(0) = 0, one
    // shared increment per level, antithetic +/- at each branching
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut level_noise: Vec<Vec<f64>> = Vec::with_capacity(steps);
    for _ in 0..steps {
        level_noise.push((0..latent_n).map(|_| StandardNormal.sample(&mut rng)).collect());
    }

    // binary path tree; each node carries its own latent state
    let mut records: Vec<(u64, usize, Vec<f64>, Option<u64>, f64)> = Vec::new();
    let mut states: Vec<Vec<f64>> = vec![vec![0.0; latent_n]];
    let mut ids: Vec<u64> = vec![0];
    records.push((0, 0, vec![0.0], None, 1.0));
    let mut next_id = 1u64;
    for k in 0..steps {
        let noise = &level_noise[k];
        let mut new_states = Vec::with_capacity(states.len() * 2);
        let mut new_ids = Vec::with_capacity(ids.len() * 2);
        for (state, &parent) in states.iter().zip(&ids) {
            for &sign in &[1.0f64, -1.0] {
                let stepped: Vec<f64> = state
                    .iter()
                    .zip(noise)
                    .map(|(&x, &w)| x * (1.0 - dt) + sign * dt.sqrt() * w)
                    .collect();
                let z = stepped.iter().sum::<f64>() / latent_n as f64;
                records.push((next_id, k + 1, vec![z], Some(parent), 0.5));
                new_ids.push(next_id);
                new_states.push(stepped);
                next_id += 1;
            }
        }
        states = new_states;
        ids = new_ids;
    }
    let tree = ScenarioTree::from_records(times, records)?;

    Ok(PresetBundle {
        name: format!("dim-reduction({latent_n})"),
        problem: ProblemConfig {
            id: format!("dim-reduction({latent_n})"),
            domain: DomainConfig {
                lower: vec![0.0],
                upper: vec![1.0],
                truncated_from_unbounded: false,
            },
            horizon: 1.0,
            drift: vec!["0.5*z".into()],
            diffusion: vec![vec!["0.5".into()]],
            running_cost: "1 + x*(1-x)".into(),
            bounds: BoundsConfig { drift: 5.0, diffusion: 0.5, cost: 1.25 },
            controls: vec![vec![0.0]],
            initial_law: LawConfig::Uniform,
            z_dim: 1,
            z_hints: vec![vec![0.0]],
        },
        tree,
        grid: GridConfig { counts: vec![401] },
        scheme: SchemeConfig::default(),
        simulation: SimConfig { n_paths: 10_000, substeps: 2, seed: 42 },
        cordes: CordesConfig::default(),
    })
}

/// Registry of preset builders; `dim-reduction(N)` carries a parameter.
type PresetBuilder = Box<dyn Fn() -> Result<PresetBundle> + Send + Sync>;

fn registry() -> Vec<(&'static str, PresetBuilder)> {
    vec![
        ("exit-time", Box::new(exit_time)),
        ("bang-bang", Box::new(bang_bang)),
        ("bounded-bhat", Box::new(bounded_bhat)),
        ("two-branch-Z", Box::new(two_branch_z)),
        ("dim-reduction", Box::new(|| dim_reduction(2))),
    ]
}

/// Looks a preset up by name.  `dim-reduction(N)` accepts any N >= 1;
/// plain `dim-reduction` means N = 2.
pub fn preset(name: &str) -> Result<PresetBundle> {
    if let Some(rest) = name.strip_prefix("dim-reduction(") {
        let inner = rest.strip_suffix(')').ok_or_else(|| {
            BhjbError::Config(format!("malformed preset name `{name}`; want dim-reduction(N)"))
        })?;
        let latent: usize = inner.trim().parse().map_err(|_| {
            BhjbError::Config(format!("dim-reduction parameter `{inner}` is not a positive integer"))
        })?;
        return dim_reduction(latent);
    }
    for (key, builder) in registry() {
        if key == name {
            return builder();
        }
    }
    Err(BhjbError::Config(format!(
        "unknown preset `{name}`; available: exit-time, bang-bang, bounded-bhat, two-branch-Z, dim-reduction(N)"
    )))
}

pub fn preset_names() -> Vec<&'static str> {
    registry().into_iter().map(|(k, _)| k).collect()
}
