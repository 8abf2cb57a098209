//! `bhjb`: solve finite-horizon stochastic control problems whose observable
//! parameter process is given as a scenario tree.
//!
//! Subcommands mirror the pipeline: `validate` checks a problem and tree
//! against the standing assumptions, `check-cordes` certifies
//! well-posedness, `solve` runs the backward HJB sweep and extracts the
//! feedback policy, `simulate` cross-checks the solved value by Monte
//! Carlo, and `verify` reruns every consistency check on one problem.
//!
//! Exit codes: 0 on success, 2 for configuration errors (bad files, bad
//! flags, dimension mismatches), 3 for validation or numerical failures.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use bhjb_core::config::{
    build_cordes_options, build_domain, build_problem, FileConfig, ProblemConfig, SimConfig,
};
use bhjb_core::cordes::{check_cordes, CaseSelect, CordesReport};
use bhjb_core::error::{BhjbError, Result};
use bhjb_core::fields::{
    density_to_csv, policy_from_csv, policy_to_csv, value_to_csv, PolicyField,
};
use bhjb_core::grid::SpatialGrid;
use bhjb_core::hjb::{solve_hjb, value_at_initial, verify_hjb_residual, CordesGate};
use bhjb_core::mc::duality_gap;
use bhjb_core::pde::{duality_cost, pair_initial, solve_forward_kolmogorov};
use bhjb_core::preset::preset;
use bhjb_core::problem::{validate_problem, ControlProblem, ValidatedProblem};
use bhjb_core::tree::{
    tree_from_json, tree_to_json, validate_tree, ScenarioTree, ValidatedTree,
};

#[derive(Parser)]
#[command(
    name = "bhjb",
    version,
    about = "Backward HJB solver for controlled diffusions with an observable scenario-tree parameter process"
)]
struct Cli {
    /// Worker threads (default: all cores; the BHJB_THREADS variable is the
    /// fallback when the flag is absent)
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration (problem, grid, scheme, simulation, cordes)
    #[arg(long)]
    config: Option<PathBuf>,

    /// Built-in problem bundle: exit-time, bang-bang, bounded-bhat,
    /// two-branch-Z or dim-reduction(N)
    #[arg(long)]
    preset: Option<String>,

    /// Scenario tree JSON; required with `problem` configs, optional
    /// override for presets
    #[arg(long)]
    tree: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Check a problem and tree against the standing assumptions
    Validate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Certify well-posedness of the control-dependent diffusion
    CheckCordes {
        #[command(flatten)]
        run: RunArgs,
        /// Force a case (auto, i, ii, iii) instead of automatic selection
        #[arg(long)]
        case: Option<String>,
        /// Sample budget over the domain, control set and tree values
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Solve the backward HJB equation and extract the feedback policy
    Solve {
        #[command(flatten)]
        run: RunArgs,
        /// Output directory for the resolved config, reports and fields
        #[arg(long)]
        out: Option<PathBuf>,
        /// Time-stepping weight in [0, 1]; 1 is fully implicit
        #[arg(long)]
        theta: Option<f64>,
        /// Also write value.csv, policy.csv and density.csv under --out
        #[arg(long)]
        dump_fields: bool,
        /// Proceed even if the well-posedness certificate fails
        #[arg(long)]
        override_cordes: bool,
    },
    /// Monte-Carlo cost of the solved (or supplied) policy vs the PDE value
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        /// Number of sample paths
        #[arg(short = 'N', long)]
        n_paths: Option<usize>,
        /// Euler substeps per tree edge
        #[arg(long)]
        substeps: Option<usize>,
        /// RNG seed (one stream per path)
        #[arg(long)]
        seed: Option<u64>,
        /// Reuse a policy.csv from an earlier `solve --dump-fields` run
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        override_cordes: bool,
    },
    /// Run every consistency check: certificate, residual, exact forward
    /// duality and the bias-adjusted Monte-Carlo gap
    Verify {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        override_cordes: bool,
    },
}

/// Everything the subcommands need, resolved from flags, config file and
/// preset registry.
struct Loaded {
    resolved: FileConfig,
    preset_name: Option<String>,
    problem_cfg: ProblemConfig,
    problem: ControlProblem,
    tree: ScenarioTree,
    grid: SpatialGrid,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| BhjbError::Config(format!("cannot read {}: {e}", path.display())))
}

/// Sections of a preset bundle yield to config-file sections that were set
/// to something other than the serde defaults.
fn pick<T: PartialEq + Default + Clone>(from_file: &T, from_bundle: T) -> T {
    if *from_file == T::default() {
        from_bundle
    } else {
        from_file.clone()
    }
}

fn load(run: &RunArgs) -> Result<Loaded> {
    let mut cfg = match &run.config {
        Some(path) => FileConfig::from_json(&read_text(path)?)?,
        None => FileConfig::default(),
    };
    if let Some(name) = &run.preset {
        if cfg.problem.is_some() {
            return Err(BhjbError::Config(
                "--preset conflicts with the `problem` section of the config file".into(),
            ));
        }
        cfg.preset = Some(name.clone());
    }

    let (problem_cfg, tree, preset_name) = match (&cfg.problem, &cfg.preset) {
        (Some(p), None) => {
            let tree_path = run.tree.as_ref().ok_or_else(|| {
                BhjbError::Config("`tree`: a problem config needs --tree <file>".into())
            })?;
            (p.clone(), tree_from_json(&read_text(tree_path)?)?, None)
        }
        (None, Some(name)) => {
            let bundle = preset(name)?;
            let tree = match &run.tree {
                Some(path) => tree_from_json(&read_text(path)?)?,
                None => bundle.tree,
            };
            cfg.grid = pick(&cfg.grid, bundle.grid);
            cfg.scheme = pick(&cfg.scheme, bundle.scheme);
            cfg.simulation = pick(&cfg.simulation, bundle.simulation);
            cfg.cordes = pick(&cfg.cordes, bundle.cordes);
            (bundle.problem, tree, Some(name.clone()))
        }
        (None, None) => {
            return Err(BhjbError::Config(
                "nothing to run: give --config with a `problem` section, or --preset".into(),
            ));
        }
        (Some(_), Some(_)) => unreachable!("FileConfig::check rejects this"),
    };

    let mut problem_cfg = problem_cfg;
    if tree.z_dim() != problem_cfg.z_dim {
        return Err(BhjbError::Dimension(format!(
            "tree z values have dimension {}, problem declares z_dim = {}",
            tree.z_dim(),
            problem_cfg.z_dim
        )));
    }
    // the validators sample coefficients at the z values the solver will
    // actually visit
    for z in tree.z_values() {
        if !problem_cfg.z_hints.contains(&z) {
            problem_cfg.z_hints.push(z);
        }
    }

    let domain = build_domain(&problem_cfg)?;
    let grid = SpatialGrid::new(&domain, &cfg.grid.counts)?;
    let problem = build_problem(&problem_cfg, &grid)?;

    let resolved = FileConfig {
        problem: Some(problem_cfg.clone()),
        preset: None,
        grid: cfg.grid.clone(),
        scheme: cfg.scheme.clone(),
        simulation: cfg.simulation.clone(),
        cordes: cfg.cordes.clone(),
    };
    Ok(Loaded { resolved, preset_name, problem_cfg, problem, tree, grid })
}

/// Validation sample budget for coefficient spot checks.
const VALIDATE_BUDGET: usize = 256;

fn wrap_validated(loaded: &Loaded) -> Result<(ValidatedProblem, ValidatedTree)> {
    let problem = ValidatedProblem::new(loaded.problem.clone(), &loaded.grid, VALIDATE_BUDGET)?;
    let tree = ValidatedTree::new(loaded.tree.clone())?;
    Ok((problem, tree))
}

fn parse_case(text: &str) -> Result<CaseSelect> {
    match text.to_ascii_lowercase().as_str() {
        "auto" => Ok(CaseSelect::Auto),
        "i" | "1" => Ok(CaseSelect::I),
        "ii" | "2" => Ok(CaseSelect::II),
        "iii" | "3" => Ok(CaseSelect::III),
        other => Err(BhjbError::Config(format!(
            "unknown cordes case `{other}`; expected auto, i, ii or iii"
        ))),
    }
}

fn certificate(loaded: &Loaded) -> Result<CordesReport> {
    let options = build_cordes_options(&loaded.resolved.cordes, &loaded.problem_cfg)?;
    check_cordes(&loaded.problem, &options)
}

fn print_cordes(report: &CordesReport) {
    let verdict = if report.pass { "PASS" } else { "FAIL" };
    println!("[{verdict}] cordes case {}: {}", report.case, report.detail);
    println!("       ellipticity constant  {:.6e}", report.ellipticity);
    println!("       lhs                   {:.6e}", report.lhs);
    println!("       bound                 {:.6e}", report.bound);
    println!("       margin                {:+.6e}", report.margin);
    println!("       samples               {}", report.sample_count);
    if let Some(w) = &report.worst {
        println!(
            "       worst sample          x = {:?}, v = {:?}, z = {:?}, t = {:.4}, value {:.6e}",
            w.x, w.v, w.z, w.t, w.value
        );
    }
}

fn write_run_dir(
    out: &Path,
    loaded: &Loaded,
    reports: &serde_json::Value,
    fields: Option<(&bhjb_core::fields::ValueField, &PolicyField, &bhjb_core::fields::DensityField)>,
    wall: f64,
    threads: usize,
) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join("resolved_config.json"), loaded.resolved.to_json()?)?;
    fs::write(out.join("tree.json"), tree_to_json(&loaded.tree)?)?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(reports)?)?;
    if let Some((value, policy, density)) = fields {
        let mut f = fs::File::create(out.join("value.csv"))?;
        value_to_csv(&mut f, &loaded.tree, &loaded.grid, value)?;
        let mut f = fs::File::create(out.join("policy.csv"))?;
        policy_to_csv(&mut f, &loaded.tree, &loaded.grid, policy)?;
        let mut f = fs::File::create(out.join("density.csv"))?;
        density_to_csv(&mut f, &loaded.tree, &loaded.grid, density)?;
    }
    // the one file that is allowed to differ between identical reruns
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut meta = fs::File::create(out.join("run_metadata.txt"))?;
    writeln!(meta, "bhjb {}", env!("CARGO_PKG_VERSION"))?;
    writeln!(meta, "unix_time {stamp}")?;
    writeln!(meta, "threads {threads}")?;
    writeln!(meta, "wall_time_secs {wall:.3}")?;
    if let Some(name) = &loaded.preset_name {
        writeln!(meta, "preset {name}")?;
    }
    writeln!(meta, "argv {}", std::env::args().collect::<Vec<_>>().join(" "))?;
    Ok(())
}

fn cmd_validate(run: &RunArgs) -> Result<()> {
    let loaded = load(run)?;
    let tree_report = validate_tree(&loaded.tree);
    let problem_report = validate_problem(&loaded.problem, &loaded.grid, VALIDATE_BUDGET);
    print!("{}", tree_report.summary());
    print!("{}", problem_report.summary());
    if !tree_report.accepted() || !problem_report.accepted() {
        return Err(BhjbError::Validation(
            tree_report
                .first_failure()
                .or_else(|| problem_report.first_failure())
                .unwrap_or_else(|| "unknown check".into()),
        ));
    }
    println!(
        "problem `{}` accepted: {} grid points, {} tree nodes over {} levels",
        loaded.problem.id,
        loaded.grid.len(),
        loaded.tree.nodes.len(),
        loaded.tree.depth() + 1
    );
    Ok(())
}

fn cmd_check_cordes(run: &RunArgs, case: Option<&str>, samples: Option<usize>) -> Result<()> {
    let mut loaded = load(run)?;
    if let Some(text) = case {
        loaded.resolved.cordes.case = parse_case(text)?;
    }
    if let Some(n) = samples {
        if n == 0 {
            return Err(BhjbError::Config("cordes sample budget must be >= 1".into()));
        }
        loaded.resolved.cordes.samples = n;
    }
    let report = certificate(&loaded)?;
    print_cordes(&report);
    if report.pass {
        Ok(())
    } else {
        Err(BhjbError::Validation(format!(
            "cordes case {} margin {:+.3e}",
            report.case, report.margin
        )))
    }
}

fn cmd_solve(
    run: &RunArgs,
    out: Option<&Path>,
    theta: Option<f64>,
    dump_fields: bool,
    override_cordes: bool,
    threads: usize,
) -> Result<()> {
    let mut loaded = load(run)?;
    if let Some(t) = theta {
        if !(0.0..=1.0).contains(&t) {
            return Err(BhjbError::Config("theta must lie in [0, 1]".into()));
        }
        loaded.resolved.scheme.theta = t;
    }
    let (problem, tree) = wrap_validated(&loaded)?;
    let cordes_report = certificate(&loaded)?;
    let gate = if override_cordes {
        CordesGate::Override
    } else {
        CordesGate::Report(&cordes_report)
    };
    let scheme = &loaded.resolved.scheme;
    let start = Instant::now();
    let (value, policy, report) = solve_hjb(
        &problem,
        &tree,
        &loaded.grid,
        scheme.theta,
        scheme.policy_iter_tol,
        scheme.max_policy_iters,
        gate,
    )?;
    let wall = start.elapsed().as_secs_f64();
    let at_initial = value_at_initial(&value, &problem.initial_law, &loaded.grid, &tree)?;

    println!(
        "solved `{}`: {} grid points, {} tree nodes, depth {}",
        problem.id,
        loaded.grid.len(),
        tree.nodes.len(),
        tree.depth()
    );
    println!("value at initial law   {:.8}", at_initial);
    println!(
        "policy iterations      max {} per level (total linear solves {})",
        report.policy_iterations.iter().max().copied().unwrap_or(0),
        report.total_linear_solves
    );
    println!("hjb residual           {:.3e}", report.residual);
    println!("wall time              {:.3} s", report.wall_time_secs);

    if let Some(dir) = out {
        let density = solve_forward_kolmogorov(
            &problem,
            &tree,
            &loaded.grid,
            &policy,
            &problem.initial_law,
            scheme.theta,
        )?;
        let mut reports = serde_json::json!({
            "cordes": cordes_report,
            "solve": report,
            "value_at_initial": at_initial,
        });
        // identical reruns must emit identical report files; timing lives
        // in run_metadata.txt instead
        if let Some(solve) = reports["solve"].as_object_mut() {
            solve.remove("wall_time_secs");
        }
        let fields = if dump_fields { Some((&value, &policy, &density)) } else { None };
        write_run_dir(dir, &loaded, &reports, fields, wall, threads)?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_simulate(
    run: &RunArgs,
    n_paths: Option<usize>,
    substeps: Option<usize>,
    seed: Option<u64>,
    policy_path: Option<&Path>,
    override_cordes: bool,
) -> Result<()> {
    let loaded = load(run)?;
    let (problem, tree) = wrap_validated(&loaded)?;
    let sim = SimConfig {
        n_paths: n_paths.unwrap_or(loaded.resolved.simulation.n_paths),
        substeps: substeps.unwrap_or(loaded.resolved.simulation.substeps),
        seed: seed.unwrap_or(loaded.resolved.simulation.seed),
    };
    let scheme = &loaded.resolved.scheme;
    let policy = match policy_path {
        Some(path) => {
            let file = fs::File::open(path)
                .map_err(|e| BhjbError::Config(format!("cannot read {}: {e}", path.display())))?;
            policy_from_csv(
                std::io::BufReader::new(file),
                &loaded.tree,
                &loaded.grid,
                problem.controls.len(),
            )?
        }
        None => {
            let cordes_report = certificate(&loaded)?;
            let gate = if override_cordes {
                CordesGate::Override
            } else {
                CordesGate::Report(&cordes_report)
            };
            let (_, policy, _) = solve_hjb(
                &problem,
                &tree,
                &loaded.grid,
                scheme.theta,
                scheme.policy_iter_tol,
                scheme.max_policy_iters,
                gate,
            )?;
            policy
        }
    };
    let report = duality_gap(
        &problem,
        &tree,
        &loaded.grid,
        &policy,
        sim.n_paths,
        sim.substeps,
        sim.seed,
        scheme.theta,
    )?;
    println!(
        "monte-carlo mean       {:.8} +/- {:.2e}  (n = {}, substeps = {}, seed = {})",
        report.mc.mean, report.mc.stderr, report.mc.n, sim.substeps, report.mc.seed
    );
    println!("pde value              {:.8}", report.pde_value);
    println!("difference             {:+.3e}", report.diff);
    println!("z score (raw)          {:.2}", report.z_raw);
    println!("bias allowance         {:.3e}", report.bias_allowance);
    println!("z score (adjusted)     {:.2}", report.z_adjusted);
    Ok(())
}

fn cmd_verify(run: &RunArgs, override_cordes: bool) -> Result<()> {
    let loaded = load(run)?;
    let (problem, tree) = wrap_validated(&loaded)?;
    let scheme = &loaded.resolved.scheme;
    let sim = &loaded.resolved.simulation;
    let mut failures = Vec::new();

    let cordes_report = certificate(&loaded)?;
    let cordes_ok = cordes_report.pass || override_cordes;
    println!(
        "[{}] certificate: case {} margin {:+.3e}{}",
        if cordes_ok { "PASS" } else { "FAIL" },
        cordes_report.case,
        cordes_report.margin,
        if !cordes_report.pass && override_cordes { " (overridden)" } else { "" }
    );
    if !cordes_ok {
        failures.push(format!("certificate margin {:+.3e}", cordes_report.margin));
    }

    let gate = if override_cordes || !cordes_report.pass {
        CordesGate::Override
    } else {
        CordesGate::Report(&cordes_report)
    };
    let (value, policy, solve_report) = solve_hjb(
        &problem,
        &tree,
        &loaded.grid,
        scheme.theta,
        scheme.policy_iter_tol,
        scheme.max_policy_iters,
        gate,
    )?;

    const RESIDUAL_TOL: f64 = 1e-8;
    let residual = verify_hjb_residual(&value, &policy, &problem, &tree, &loaded.grid)?;
    let residual_ok = residual <= RESIDUAL_TOL;
    println!(
        "[{}] hjb residual: {:.3e} (tolerance {:.0e}, solver reported {:.3e})",
        if residual_ok { "PASS" } else { "FAIL" },
        residual,
        RESIDUAL_TOL,
        solve_report.residual
    );
    if !residual_ok {
        failures.push(format!("hjb residual {residual:.3e}"));
    }

    // exact discrete duality: the initial pairing of the backward value
    // equals the forward-weighted running-cost sum to solver precision
    let pairing = pair_initial(&problem.initial_law, &loaded.grid, &tree, &value)?;
    let forward = duality_cost(
        &problem,
        &tree,
        &loaded.grid,
        &policy,
        &problem.initial_law,
        scheme.theta,
    )?;
    let dual_gap = (pairing - forward).abs();
    let dual_tol = 1e-10 * pairing.abs().max(1.0);
    let dual_ok = dual_gap <= dual_tol;
    println!(
        "[{}] forward duality: |{:.8} - {:.8}| = {:.3e} (tolerance {:.3e})",
        if dual_ok { "PASS" } else { "FAIL" },
        pairing,
        forward,
        dual_gap,
        dual_tol
    );
    if !dual_ok {
        failures.push(format!("duality gap {dual_gap:.3e}"));
    }

    const Z_TOL: f64 = 4.0;
    let mc = duality_gap(
        &problem,
        &tree,
        &loaded.grid,
        &policy,
        sim.n_paths,
        sim.substeps,
        sim.seed,
        scheme.theta,
    )?;
    let mc_ok = mc.z_adjusted <= Z_TOL;
    println!(
        "[{}] monte-carlo gap: mean {:.6} vs pde {:.6}, adjusted z = {:.2} (limit {Z_TOL})",
        if mc_ok { "PASS" } else { "FAIL" },
        mc.mc.mean,
        mc.pde_value,
        mc.z_adjusted
    );
    if !mc_ok {
        failures.push(format!("adjusted z {:.2}", mc.z_adjusted));
    }

    if failures.is_empty() {
        println!("all checks passed for `{}`", problem.id);
        Ok(())
    } else {
        Err(BhjbError::Validation(failures.join("; ")))
    }
}

fn configure_threads(flag: Option<usize>) -> Result<usize> {
    let from_env = std::env::var("BHJB_THREADS").ok().and_then(|s| s.parse::<usize>().ok());
    let requested = flag.or(from_env);
    if let Some(n) = requested {
        if n == 0 {
            return Err(BhjbError::Config("threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| BhjbError::Config(format!("thread pool: {e}")))?;
        Ok(n)
    } else {
        Ok(rayon::current_num_threads())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = match configure_threads(cli.threads) {
        Ok(n) => n,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let outcome = match &cli.command {
        Command::Validate { run } => cmd_validate(run),
        Command::CheckCordes { run, case, samples } => {
            cmd_check_cordes(run, case.as_deref(), *samples)
        }
        Command::Solve { run, out, theta, dump_fields, override_cordes } => {
            cmd_solve(run, out.as_deref(), *theta, *dump_fields, *override_cordes, threads)
        }
        Command::Simulate { run, n_paths, substeps, seed, policy, override_cordes } => {
            cmd_simulate(run, *n_paths, *substeps, *seed, policy.as_deref(), *override_cordes)
        }
        Command::Verify { run, override_cordes } => cmd_verify(run, *override_cordes),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
