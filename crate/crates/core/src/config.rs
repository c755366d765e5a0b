//! TOML run configuration.
//!
//! ```toml
//! seed = 7
//!
//! [problem]
//! dimension = 1
//! horizon = 1.0
//! constraint_matrix = [[1.0]]
//! constraint_bounds = [1.0]
//! payoff = { kind = "linear_box", rate_cap = 1.0 }
//!
//! [process]
//! kind = "constant"
//! value = [2.0]
//! stages = 4
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dual::MartingaleSpec;
use crate::error::{Error, Result};
use crate::model::{
    validate_problem, FeasibleSet, LatticeNode, LatticeProcess, PathEnsemble, PayoffSpec, ProblemSpec,
};
use crate::oracle::uniform_steps;
use crate::residual::{Quadrature, ResidualOptions};
use crate::solver::{BudgetGrid, DEFAULT_KNOTS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub problem: ProblemConfig,
    pub process: ProcessConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub residual: ResidualConfig,
    #[serde(default)]
    pub dual: DualConfig,
    #[serde(default)]
    pub compare: CompareConfig,
    #[serde(default)]
    pub output: OutputConfig,
    /// Directory that relative file references resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub dimension: usize,
    pub horizon: f64,
    pub constraint_matrix: Vec<Vec<f64>>,
    pub constraint_bounds: Vec<f64>,
    pub payoff: PayoffConfig,
    /// Defaults to the origin.
    #[serde(default)]
    pub initial_budget: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PayoffConfig {
    LinearBox { rate_cap: f64 },
    LinearQuadratic { penalty_matrix: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProcessConfig {
    /// Same value at every stage of a uniform grid.
    Constant { value: Vec<f64>, stages: usize },
    /// One row per grid time `0..=N`, uniform grid.
    Deterministic { values: Vec<Vec<f64>> },
    Binomial {
        stages: usize,
        x0: Vec<f64>,
        up: Vec<f64>,
        down: Vec<f64>,
        p_up: f64,
    },
    /// Explicit tree: `nodes[k][j]` is node `j` at time `time_grid[k]`.
    Lattice {
        time_grid: Vec<f64>,
        nodes: Vec<Vec<NodeConfig>>,
    },
    /// Path CSV (`path_id, stage, x_1..x_n`); supports the dual bound only.
    PathsCsv { file: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub value: Vec<f64>,
    pub probability: f64,
    /// `[[child, transition probability], ..]`.
    #[serde(default)]
    pub children: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    /// Uniform knots per budget axis.
    #[serde(default = "default_knots")]
    pub knots: usize,
}

fn default_knots() -> usize {
    DEFAULT_KNOTS
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { knots: DEFAULT_KNOTS }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualConfig {
    /// Exit threshold on the headline norm; `--threshold` overrides.
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub quadrature: QuadratureConfig,
    #[serde(default)]
    pub follow_trajectory: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuadratureConfig {
    #[default]
    RightLimit,
    LeftEndpoint,
}

impl ResidualConfig {
    pub fn options(&self) -> ResidualOptions {
        ResidualOptions {
            quadrature: match self.quadrature {
                QuadratureConfig::RightLimit => Quadrature::RightLimit,
                QuadratureConfig::LeftEndpoint => Quadrature::LeftEndpoint,
            },
            follow_trajectory: self.follow_trajectory,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualConfig {
    /// Integration order `k` of the penalty.
    #[serde(default)]
    pub order: usize,
    #[serde(default)]
    pub penalty: PenaltyKind,
    /// Candidates searched when `penalty = "family"`.
    #[serde(default = "default_family_size")]
    pub family_size: usize,
    /// Entry range of the random linear statistics.
    #[serde(default = "default_scale")]
    pub scale: f64,
    /// Sampled paths; 0 enumerates the lattice exactly when it is small enough.
    #[serde(default)]
    pub paths: usize,
}

fn default_family_size() -> usize {
    50
}

fn default_scale() -> f64 {
    1.0
}

impl Default for DualConfig {
    fn default() -> Self {
        Self {
            order: 0,
            penalty: PenaltyKind::default(),
            family_size: default_family_size(),
            scale: default_scale(),
            paths: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    Zero,
    /// Doob martingale of `X(T)` itself.
    Identity,
    /// Best of `family_size` random linear statistics.
    Family,
    /// Built from the solved value function.
    #[default]
    ValueFunction,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    /// Explicit candidate rates per coordinate.
    #[serde(default)]
    pub rate_steps: Option<Vec<Vec<f64>>>,
    /// Uniform candidate spacing from 0 up to `rate_max` (default: the rate cap).
    #[serde(default)]
    pub rate_step: Option<f64>,
    #[serde(default)]
    pub rate_max: Option<f64>,
    /// Pass iff `|J_solver - J_oracle| <= tolerance`.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn default_tolerance() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: default_dir() }
    }
}

/// Driving process built from the configuration.
#[derive(Debug, Clone)]
pub enum Process {
    Lattice(LatticeProcess),
    Paths(PathEnsemble),
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.base_dir = base_dir.to_path_buf();
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Output directory, relative paths resolved against the config location.
    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output.dir)
    }

    pub fn problem(&self) -> Result<ProblemSpec> {
        let p = &self.problem;
        let spec = ProblemSpec {
            n: p.dimension,
            horizon: p.horizon,
            feasible_set: FeasibleSet::new(p.constraint_matrix.clone(), p.constraint_bounds.clone()),
            payoff: match &p.payoff {
                PayoffConfig::LinearBox { rate_cap } => PayoffSpec::LinearBox { rate_cap: *rate_cap },
                PayoffConfig::LinearQuadratic { penalty_matrix } => PayoffSpec::LinearQuadratic {
                    penalty_matrix: penalty_matrix.clone(),
                },
            },
            initial_budget: p.initial_budget.clone().unwrap_or_else(|| vec![0.0; p.dimension]),
        };
        let v = validate_problem(&spec);
        if v.is_empty() {
            Ok(spec)
        } else {
            Err(Error::Config(format!("invalid problem: {}", v.join("; "))))
        }
    }

    pub fn process(&self) -> Result<Process> {
        let horizon = self.problem.horizon;
        let lattice = match &self.process {
            ProcessConfig::Constant { value, stages } => LatticeProcess::constant(value, *stages, horizon),
            ProcessConfig::Deterministic { values } => {
                let stages = values.len().saturating_sub(1);
                let grid = (0..=stages).map(|k| horizon * k as f64 / stages.max(1) as f64).collect();
                LatticeProcess::deterministic(grid, values.clone())
            }
            ProcessConfig::Binomial {
                stages,
                x0,
                up,
                down,
                p_up,
            } => LatticeProcess::binomial(*stages, horizon, x0, up, down, *p_up),
            ProcessConfig::Lattice { time_grid, nodes } => LatticeProcess::new(
                time_grid.clone(),
                nodes
                    .iter()
                    .map(|stage| {
                        stage
                            .iter()
                            .map(|n| LatticeNode {
                                value: n.value.clone(),
                                probability: n.probability,
                                children: n.children.clone(),
                            })
                            .collect()
                    })
                    .collect(),
            ),
            ProcessConfig::PathsCsv { file } => {
                let path = self.resolve(file);
                let f = fs::File::open(&path)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
                let ensemble = PathEnsemble::from_csv(f, horizon).map_err(|e| Error::Config(e.to_string()))?;
                if ensemble.n != self.problem.dimension {
                    return Err(Error::Config(format!(
                        "path CSV has {} coordinates, problem has {}",
                        ensemble.n, self.problem.dimension
                    )));
                }
                return Ok(Process::Paths(ensemble));
            }
        }
        .map_err(|e| Error::Config(format!("invalid process: {e}")))?;
        if lattice.n != self.problem.dimension {
            return Err(Error::Config(format!(
                "process has {} coordinates, problem has {}",
                lattice.n, self.problem.dimension
            )));
        }
        if (lattice.horizon() - horizon).abs() > 1e-12 * horizon.max(1.0) {
            return Err(Error::Config(format!(
                "process horizon {} differs from problem horizon {horizon}",
                lattice.horizon()
            )));
        }
        Ok(Process::Lattice(lattice))
    }

    /// The lattice, or a config error naming `command` when only paths are given.
    pub fn lattice(&self, command: &str) -> Result<LatticeProcess> {
        match self.process()? {
            Process::Lattice(l) => Ok(l),
            Process::Paths(_) => Err(Error::Config(format!("`{command}` needs a lattice process, not a path CSV"))),
        }
    }

    pub fn grid(&self, problem: &ProblemSpec) -> Result<BudgetGrid> {
        if self.solver.knots < 2 {
            return Err(Error::Config("solver.knots must be at least 2".into()));
        }
        BudgetGrid::uniform(&problem.feasible_set, self.solver.knots).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn martingale_family(&self) -> Vec<MartingaleSpec> {
        MartingaleSpec::random_family(self.problem.dimension, self.dual.family_size, self.dual.scale, self.seed)
    }

    /// Candidate rates for the oracle.
    pub fn rate_steps(&self, problem: &ProblemSpec) -> Result<Vec<Vec<f64>>> {
        if let Some(steps) = &self.compare.rate_steps {
            return Ok(steps.clone());
        }
        let step = self
            .compare
            .rate_step
            .ok_or_else(|| Error::Config("compare needs rate_steps or rate_step".into()))?;
        if !(step.is_finite() && step > 0.0) {
            return Err(Error::Config("compare.rate_step must be positive".into()));
        }
        let top = match (&problem.payoff, self.compare.rate_max) {
            (_, Some(top)) => top,
            (PayoffSpec::LinearBox { rate_cap }, None) => *rate_cap,
            (PayoffSpec::LinearQuadratic { .. }, None) => {
                return Err(Error::Config("compare.rate_max is required for quadratic payoffs".into()))
            }
        };
        Ok(vec![uniform_steps(step, top); problem.n])
    }

    /// Every problem with the configuration, without running anything.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(e) = self.problem() {
            out.push(e.to_string());
        }
        if let Err(e) = self.process() {
            out.push(e.to_string());
        }
        if self.solver.knots < 2 {
            out.push("solver.knots must be at least 2".into());
        }
        if !(self.dual.scale.is_finite() && self.dual.scale >= 0.0) {
            out.push("dual.scale must be nonnegative".into());
        }
        if !(self.compare.tolerance.is_finite() && self.compare.tolerance >= 0.0) {
            out.push("compare.tolerance must be nonnegative".into());
        }
        if let Some(t) = self.residual.threshold {
            if !(t >= 0.0) {
                out.push("residual.threshold must be nonnegative".into());
            }
        }
        out
    }
}
