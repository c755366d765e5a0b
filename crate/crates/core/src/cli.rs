//! Batch front end: `bspde <solve|residual|dual|compare|validate> --config PATH`.
//!
//! Exit codes: 0 ok, 1 internal error, 2 configuration error, 3 caps or
//! threshold violation.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{PenaltyKind, Process, RunConfig};
use crate::dual::{
    dual_estimate, dual_summary, generate_martingale_penalties, penalty_search, value_function_penalty,
    write_dual_csv, MartingaleSpec,
};
use crate::error::{Error, Result};
use crate::model::{LatticeProcess, PathEnsemble, ProblemSpec, MAX_ENUMERATED_PATHS};
use crate::oracle::{brute_force_dp, oracle_step_bound};
use crate::residual::{residual_report, residual_summary, write_residual_csv};
use crate::solver::{backward_solve, read_cache, write_cache, write_solution_csv, Solution};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_VIOLATION: i32 = 3;

/// Paths sampled for the dual bound when the lattice is too large to enumerate
/// and the config does not say otherwise.
const DEFAULT_DUAL_PATHS: usize = 10_000;

#[derive(Debug, Parser)]
#[command(name = "bspde", version, about = "Swing-type control value functions on scenario lattices")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Headline residual threshold for `residual`.
    #[arg(long, global = true)]
    pub threshold: Option<f64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed, overriding the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Backward recursion; writes solution.csv, solution.bin and a summary.
    Solve,
    /// Fixed-point residual of the solved grid.
    Residual,
    /// Martingale-duality upper bound and gap to the primal value.
    Dual,
    /// Brute-force oracle against the solver.
    Compare,
    /// Check the configuration without running anything.
    Validate,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Residual => "residual",
            Command::Dual => "dual",
            Command::Compare => "compare",
            Command::Validate => "validate",
        }
    }
}

/// A loaded configuration with command-line overrides applied.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub config: RunConfig,
    pub config_path: PathBuf,
    pub config_sha256: String,
    pub threshold: Option<f64>,
    pub out: PathBuf,
}

impl Invocation {
    pub fn load(config_path: &Path) -> Result<Self> {
        let bytes = fs::read(config_path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", config_path.display())))?;
        let text = String::from_utf8(bytes.clone())
            .map_err(|_| Error::Config(format!("{} is not UTF-8", config_path.display())))?;
        let config = RunConfig::parse(&text, config_path.parent().unwrap_or(Path::new(".")))
            .map_err(|e| Error::Config(format!("{}: {e}", config_path.display())))?;
        let out = config.output_dir();
        Ok(Self {
            threshold: config.residual.threshold,
            config,
            config_path: config_path.to_path_buf(),
            config_sha256: Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect(),
            out,
        })
    }

    fn output(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

/// Result of one command that ran to completion.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    /// False on a threshold, tolerance or weak-duality violation.
    pub passed: bool,
    pub summary: String,
    pub outputs: Vec<PathBuf>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config: String,
    config_sha256: &'a str,
    seed: u64,
    version: &'a str,
    passed: bool,
    outputs: Vec<String>,
}

pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Config(_) => EXIT_CONFIG,
        Error::CapsExceeded(_) => EXIT_VIOLATION,
        _ => EXIT_INTERNAL,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            if outcome.passed {
                EXIT_OK
            } else {
                EXIT_VIOLATION
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cli: &Cli) -> Result<Outcome> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config PATH is required".into()))?;
    let mut inv = Invocation::load(path)?;
    if let Some(seed) = cli.seed {
        inv.config.seed = seed;
    }
    if let Some(t) = cli.threshold {
        inv.threshold = Some(t);
    }
    if let Some(out) = &cli.out {
        inv.out = out.clone();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let outcome = pool.install(|| match cli.command {
        Command::Solve => cmd_solve(&inv),
        Command::Residual => cmd_residual(&inv),
        Command::Dual => cmd_dual(&inv),
        Command::Compare => cmd_compare(&inv),
        Command::Validate => cmd_validate(&inv),
    })?;
    write_manifest(&inv, cli.command.name(), &outcome)?;
    Ok(outcome)
}

fn write_manifest(inv: &Invocation, command: &str, outcome: &Outcome) -> Result<()> {
    fs::create_dir_all(&inv.out)?;
    let manifest = Manifest {
        command,
        config: inv.config_path.display().to_string(),
        config_sha256: &inv.config_sha256,
        seed: inv.config.seed,
        version: env!("CARGO_PKG_VERSION"),
        passed: outcome.passed,
        outputs: outcome.outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::InvalidInput(e.to_string()))?;
    fs::write(inv.output(&format!("{command}_manifest.json")), text + "\n")?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn finish(inv: &Invocation, name: &str, summary: &str, mut outputs: Vec<PathBuf>) -> Result<Vec<PathBuf>> {
    let path = inv.output(name);
    fs::create_dir_all(&inv.out)?;
    fs::write(&path, summary)?;
    outputs.push(path);
    Ok(outputs)
}

/// The solved grid for this configuration: the cache from an earlier `solve`
/// of the identical config file when present, else a fresh solve.
pub fn load_or_solve(inv: &Invocation, problem: &ProblemSpec, lattice: &LatticeProcess) -> Result<(Solution, bool)> {
    let grid = inv.config.grid(problem)?;
    if let Some(cached) = cached_solution(inv) {
        let times: Vec<f64> = cached.stages.iter().map(|s| s.time).collect();
        if cached.problem == *problem && cached.grid.knots == grid.knots && times == lattice.time_grid {
            return Ok((cached, true));
        }
    }
    Ok((backward_solve(problem, lattice, &grid)?, false))
}

fn cached_solution(inv: &Invocation) -> Option<Solution> {
    let manifest = fs::read_to_string(inv.output("solve_manifest.json")).ok()?;
    let manifest: serde_json::Value = serde_json::from_str(&manifest).ok()?;
    if manifest.get("config_sha256")?.as_str()? != inv.config_sha256 {
        return None;
    }
    read_cache(File::open(inv.output("solution.bin")).ok()?).ok()
}

pub fn cmd_solve(inv: &Invocation) -> Result<Outcome> {
    let start = Instant::now();
    let problem = inv.config.problem()?;
    let lattice = inv.config.lattice("solve")?;
    let grid = inv.config.grid(&problem)?;
    let solution = backward_solve(&problem, &lattice, &grid)?;
    let value = solution.initial_value()?;
    let csv_path = inv.output("solution.csv");
    write_solution_csv(&solution, create(&csv_path)?)?;
    let cache_path = inv.output("solution.bin");
    write_cache(&solution, create(&cache_path)?)?;

    let mut s = String::new();
    let _ = writeln!(s, "command: solve");
    let _ = writeln!(s, "J(0, y0): {value}");
    let _ = writeln!(s, "initial_budget: {:?}", problem.initial_budget);
    let _ = writeln!(s, "stages: {}", lattice.num_stages());
    let _ = writeln!(s, "lattice_nodes: {}", lattice.stages.iter().map(Vec::len).sum::<usize>());
    let _ = writeln!(s, "grid_knots: {:?}", grid.sizes());
    let _ = writeln!(s, "grid_points_inside: {}", grid.inside.iter().filter(|b| **b).count());
    let _ = writeln!(s, "wall_time_s: {:.3}", start.elapsed().as_secs_f64());
    let outputs = finish(inv, "solve_summary.txt", &s, vec![csv_path, cache_path])?;
    Ok(Outcome {
        passed: true,
        summary: s,
        outputs,
    })
}

pub fn cmd_residual(inv: &Invocation) -> Result<Outcome> {
    let start = Instant::now();
    let problem = inv.config.problem()?;
    let lattice = inv.config.lattice("residual")?;
    let (solution, cached) = load_or_solve(inv, &problem, &lattice)?;
    let report = residual_report(&solution, &lattice, inv.config.residual.options())?;
    let csv_path = inv.output("residual.csv");
    write_residual_csv(&report, create(&csv_path)?)?;
    let passed = inv.threshold.is_none_or(|t| report.headline_max <= t);

    let mut s = String::from("command: residual\n");
    let _ = writeln!(s, "solution: {}", if cached { "cache" } else { "solved" });
    s.push_str(&residual_summary(&report));
    if let Some(t) = inv.threshold {
        let _ = writeln!(s, "threshold: {t:e}");
        let _ = writeln!(s, "result: {}", if passed { "pass" } else { "FAIL" });
    }
    let _ = writeln!(s, "wall_time_s: {:.3}", start.elapsed().as_secs_f64());
    let outputs = finish(inv, "residual_summary.txt", &s, vec![csv_path])?;
    Ok(Outcome {
        passed,
        summary: s,
        outputs,
    })
}

fn dual_paths(inv: &Invocation, process: &Process) -> Result<PathEnsemble> {
    match process {
        Process::Paths(e) => Ok(e.clone()),
        Process::Lattice(l) => {
            if inv.config.dual.paths == 0 && l.path_count() <= MAX_ENUMERATED_PATHS {
                l.enumerate_paths()
            } else {
                let count = if inv.config.dual.paths == 0 {
                    DEFAULT_DUAL_PATHS
                } else {
                    inv.config.dual.paths
                };
                Ok(l.sample_paths(count, inv.config.seed))
            }
        }
    }
}

pub fn cmd_dual(inv: &Invocation) -> Result<Outcome> {
    let start = Instant::now();
    let problem = inv.config.problem()?;
    let process = inv.config.process()?;
    let ensemble = dual_paths(inv, &process)?;
    let lattice = match &process {
        Process::Lattice(l) => Some(l),
        Process::Paths(_) => None,
    };
    let solution = match lattice {
        Some(l) => Some(load_or_solve(inv, &problem, l)?.0),
        None => None,
    };
    let order = inv.config.dual.order;
    let mut notes = String::new();
    let (estimate, penalties) = match inv.config.dual.penalty {
        PenaltyKind::Zero => {
            let p = generate_martingale_penalties(&ensemble, lattice, &MartingaleSpec::Zero, order)?;
            (dual_estimate(&problem, &ensemble, &p)?, p)
        }
        PenaltyKind::Identity => {
            let p = generate_martingale_penalties(&ensemble, lattice, &MartingaleSpec::identity(problem.n), order)?;
            (dual_estimate(&problem, &ensemble, &p)?, p)
        }
        PenaltyKind::Family => {
            let family = inv
                .config
                .martingale_family()
                .iter()
                .map(|spec| generate_martingale_penalties(&ensemble, lattice, spec, order))
                .collect::<Result<Vec<_>>>()?;
            let search = penalty_search(&problem, &ensemble, &family, family.len())?;
            let _ = writeln!(notes, "family_size: {}", family.len());
            let _ = writeln!(notes, "best_index: {}", search.best_index);
            let p = family.into_iter().nth(search.best_index).expect("index from search");
            (search.best, p)
        }
        PenaltyKind::ValueFunction => {
            let (Some(l), Some(sol)) = (lattice, solution.as_ref()) else {
                return Err(Error::Config("penalty = \"value_function\" needs a lattice process".into()));
            };
            let p = value_function_penalty(sol, l, &ensemble, order)?;
            (dual_estimate(&problem, &ensemble, &p)?, p)
        }
    };
    let primal = match &solution {
        Some(sol) => Some((sol.initial_value()?, 0.0)),
        None => None,
    };
    let passed = primal.is_none_or(|(v, se)| estimate.dominates(v, se));
    let csv_path = inv.output("dual.csv");
    write_dual_csv(&estimate, &penalties, create(&csv_path)?)?;

    let mut s = String::from("command: dual\n");
    let _ = writeln!(s, "paths: {}", ensemble.paths.len());
    let _ = writeln!(s, "exact_paths: {}", ensemble.exact);
    s.push_str(&notes);
    s.push_str(&dual_summary(&estimate, primal));
    let _ = writeln!(s, "wall_time_s: {:.3}", start.elapsed().as_secs_f64());
    let outputs = finish(inv, "dual_summary.txt", &s, vec![csv_path])?;
    Ok(Outcome {
        passed,
        summary: s,
        outputs,
    })
}

pub fn cmd_compare(inv: &Invocation) -> Result<Outcome> {
    let start = Instant::now();
    let problem = inv.config.problem()?;
    let lattice = inv.config.lattice("compare")?;
    let steps = inv.config.rate_steps(&problem)?;
    let oracle = brute_force_dp(&problem, &lattice, &steps)?;
    let bound = oracle_step_bound(&problem, &lattice, &steps)?;
    let (solution, cached) = load_or_solve(inv, &problem, &lattice)?;
    let solver_value = solution.initial_value()?;
    let diff = solver_value - oracle.value;
    let tolerance = inv.config.compare.tolerance;
    let passed = diff.abs() <= tolerance;

    let csv_path = inv.output("compare.csv");
    let mut w = csv::Writer::from_writer(create(&csv_path)?);
    let mut header = vec!["stage".to_string(), "node_id".to_string()];
    header.extend((1..=problem.n).map(|i| format!("y_{i}")));
    header.extend(["J_oracle", "J_solver", "diff"].map(String::from));
    w.write_record(&header)?;
    for e in oracle.entries() {
        let j = solution.value_at(e.stage, e.node, &e.budget)?;
        let mut row = vec![e.stage.to_string(), e.node.to_string()];
        row.extend(e.budget.iter().map(f64::to_string));
        row.extend([e.value, j, j - e.value].map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    drop(w);

    let mut s = String::from("command: compare\n");
    let _ = writeln!(s, "solution: {}", if cached { "cache" } else { "solved" });
    let _ = writeln!(s, "J_oracle: {}", oracle.value);
    let _ = writeln!(s, "J_solver: {solver_value}");
    let _ = writeln!(s, "diff: {diff:e}");
    let _ = writeln!(s, "tolerance: {tolerance:e}");
    let _ = writeln!(s, "oracle_rate_grid_bound: {bound:e}");
    let _ = writeln!(s, "oracle_states: {}", oracle.entries().len());
    let _ = writeln!(s, "result: {}", if passed { "pass" } else { "FAIL" });
    let _ = writeln!(s, "wall_time_s: {:.3}", start.elapsed().as_secs_f64());
    let outputs = finish(inv, "compare_summary.txt", &s, vec![csv_path])?;
    Ok(Outcome {
        passed,
        summary: s,
        outputs,
    })
}

pub fn cmd_validate(inv: &Invocation) -> Result<Outcome> {
    let problems = inv.config.validate();
    if !problems.is_empty() {
        return Err(Error::Config(problems.join("; ")));
    }
    Ok(Outcome {
        passed: true,
        summary: format!("config ok: {}\n", inv.config_path.display()),
        outputs: Vec::new(),
    })
}
