//! Upper bounds on the value by martingale duality: penalize anticipative
//! pathwise optima with processes whose integral against any adapted rate has
//! zero mean.

mod pathwise;

pub use pathwise::{pathwise_greedy, pathwise_lp, pathwise_maximize, pathwise_qp, PathwiseResult};

use std::fmt::Write as _;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::{LatticeProcess, PathEnsemble, ProblemSpec};
use crate::solver::{extract_policy, simulate_policy, Solution};

/// `mu^(k)(t_j)` per path and grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyProcess {
    pub order: usize,
    pub time_grid: Vec<f64>,
    /// `[path][grid point][coordinate]`.
    pub values: Vec<Vec<Vec<f64>>>,
    pub provenance: String,
    pub seed: Option<u64>,
}

impl PenaltyProcess {
    /// `mu^(0)(t_j) = M(T) - M(t_j)` from martingale values `M(t_j)` per path.
    pub fn from_martingale(time_grid: Vec<f64>, martingale: &[Vec<Vec<f64>>], provenance: String, seed: Option<u64>) -> Self {
        let values = martingale
            .iter()
            .map(|m| {
                let last = &m[m.len() - 1];
                m.iter()
                    .map(|mj| last.iter().zip(mj).map(|(a, b)| a - b).collect())
                    .collect()
            })
            .collect();
        Self {
            order: 0,
            time_grid,
            values,
            provenance,
            seed,
        }
    }

    pub fn zeros(time_grid: Vec<f64>, paths: usize, n: usize) -> Self {
        let points = time_grid.len();
        Self {
            order: 0,
            time_grid,
            values: vec![vec![vec![0.0; n]; points]; paths],
            provenance: "zero".into(),
            seed: None,
        }
    }

    /// One application of `mu'(t_j) = -sum_{l >= j} dt_l (mu_l + mu_{l+1}) / 2`,
    /// each sum accumulated directly from `l = j`.
    pub fn integrate_once(&self) -> Self {
        let g = &self.time_grid;
        let last = g.len() - 1;
        let values = self
            .values
            .iter()
            .map(|path| {
                let n = path[0].len();
                (0..=last)
                    .map(|j| {
                        let mut acc = vec![0.0; n];
                        for l in j..last {
                            let h = 0.5 * (g[l + 1] - g[l]);
                            for i in 0..n {
                                acc[i] -= h * (path[l][i] + path[l + 1][i]);
                            }
                        }
                        acc
                    })
                    .collect()
            })
            .collect();
        Self {
            order: self.order + 1,
            time_grid: self.time_grid.clone(),
            values,
            provenance: self.provenance.clone(),
            seed: self.seed,
        }
    }

    /// Raises the order by `times` integrations in a single backward sweep
    /// over the grid.
    pub fn raise_order(&self, times: usize) -> Self {
        let g = &self.time_grid;
        let last = g.len() - 1;
        let values = self
            .values
            .iter()
            .map(|path| {
                let n = path[0].len();
                // orders[o][j]: order-o process at point j.
                let mut orders = vec![vec![vec![0.0; n]; last + 1]; times + 1];
                orders[0] = path.clone();
                for j in (0..last).rev() {
                    let h = 0.5 * (g[j + 1] - g[j]);
                    for o in 1..=times {
                        for i in 0..n {
                            orders[o][j][i] = orders[o][j + 1][i] - h * (orders[o - 1][j][i] + orders[o - 1][j + 1][i]);
                        }
                    }
                }
                orders.pop().expect("order zero is always present")
            })
            .collect();
        Self {
            order: self.order + times,
            time_grid: self.time_grid.clone(),
            values,
            provenance: self.provenance.clone(),
            seed: self.seed,
        }
    }

    /// Per grid point: norm of the weighted mean of `mu(t_j)` over paths and
    /// norm of its coordinate-wise standard errors.
    pub fn centering(&self, ensemble: &PathEnsemble) -> Vec<(f64, f64)> {
        let n = self.values.first().map_or(0, |p| p[0].len());
        (0..self.time_grid.len())
            .map(|j| {
                let (mut m2, mut s2) = (0.0, 0.0);
                for i in 0..n {
                    let column: Vec<f64> = self.values.iter().map(|p| p[j][i]).collect();
                    let (m, s) = ensemble.mean_and_error(&column);
                    m2 += m * m;
                    s2 += s * s;
                }
                (m2.sqrt(), s2.sqrt())
            })
            .collect()
    }

    /// `sqrt(sum_j dt_j |mu_j|^2)` for one path.
    pub fn norm(&self, path: usize) -> f64 {
        let g = &self.time_grid;
        (0..g.len() - 1)
            .map(|j| (g[j + 1] - g[j]) * self.values[path][j].iter().map(|m| m * m).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

/// Martingale parameterizations `M(t_j) = E[phi(X(T)) | F_j] - E[phi(X(T))]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MartingaleSpec {
    Zero,
    /// `phi(x) = W x` with `W` an `n x n` matrix.
    Linear { weights: Vec<Vec<f64>> },
}

impl MartingaleSpec {
    pub fn identity(n: usize) -> Self {
        MartingaleSpec::Linear {
            weights: (0..n)
                .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect(),
        }
    }

    /// `count` linear statistics with entries uniform on `[-scale, scale]`.
    pub fn random_family(n: usize, count: usize, scale: f64, seed: u64) -> Vec<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| MartingaleSpec::Linear {
                weights: (0..n)
                    .map(|_| (0..n).map(|_| rng.random_range(-scale..=scale)).collect())
                    .collect(),
            })
            .collect()
    }

    pub fn describe(&self) -> String {
        match self {
            MartingaleSpec::Zero => "zero".into(),
            MartingaleSpec::Linear { weights } => format!("linear {weights:?}"),
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        match self {
            MartingaleSpec::Zero => vec![0.0; x.len()],
            MartingaleSpec::Linear { weights } => weights
                .iter()
                .map(|row| row.iter().zip(x).map(|(w, x)| w * x).sum())
                .collect(),
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        if let MartingaleSpec::Linear { weights } = self {
            check_dim(n, weights.len())?;
            for row in weights {
                check_dim(n, row.len())?;
            }
            if weights.iter().flatten().any(|w| !w.is_finite()) {
                return Err(Error::InvalidInput("martingale weights must be finite".into()));
            }
        }
        Ok(())
    }
}

/// Penalties of order `order` on the paths of `ensemble`. When the paths
/// carry lattice nodes and the lattice is given, the martingale is the exact
/// Doob martingale of the terminal statistic; otherwise it is the running sum
/// of increments of the statistic centered across paths.
pub fn generate_martingale_penalties(
    ensemble: &PathEnsemble,
    lattice: Option<&LatticeProcess>,
    spec: &MartingaleSpec,
    order: usize,
) -> Result<PenaltyProcess> {
    spec.check(ensemble.n)?;
    let grid = ensemble.time_grid.clone();
    let last = ensemble.num_stages();
    let martingale: Vec<Vec<Vec<f64>>> = match (lattice, &ensemble.nodes) {
        (Some(lattice), Some(nodes)) => {
            check_dim(lattice.n, ensemble.n)?;
            if lattice.num_stages() != last {
                return Err(Error::InvalidInput("ensemble and lattice differ in stage count".into()));
            }
            let cond = lattice.conditional_expectations(|x| spec.apply(x));
            let base = &cond[0][0];
            nodes
                .iter()
                .map(|path| {
                    path.iter()
                        .enumerate()
                        .map(|(k, &j)| cond[k][j].iter().zip(base).map(|(a, b)| a - b).collect())
                        .collect()
                })
                .collect()
        }
        _ => {
            let stats: Vec<Vec<Vec<f64>>> = ensemble
                .paths
                .iter()
                .map(|p| p.iter().map(|x| spec.apply(x)).collect())
                .collect();
            let n = ensemble.n;
            let mut mean_increment = vec![vec![0.0; n]; last];
            for (s, w) in stats.iter().zip(&ensemble.weights) {
                for j in 0..last {
                    for i in 0..n {
                        mean_increment[j][i] += w * (s[j + 1][i] - s[j][i]);
                    }
                }
            }
            stats
                .iter()
                .map(|s| {
                    let mut m = vec![vec![0.0; n]; last + 1];
                    for j in 0..last {
                        for i in 0..n {
                            m[j + 1][i] = m[j][i] + (s[j + 1][i] - s[j][i]) - mean_increment[j][i];
                        }
                    }
                    m
                })
                .collect()
        }
    };
    let base = PenaltyProcess::from_martingale(grid, &martingale, spec.describe(), ensemble.seed);
    Ok(if order == 0 { base } else { base.raise_order(order) })
}

/// Penalty built from the solved gradient along the optimally controlled
/// budget path: the martingale increments are
/// `-(D+J(t_{l+1}, node_{l+1}, Y_{l+1}) - E_l[D+J(t_{l+1}, ., Y_{l+1})])`,
/// where `Y_{l+1}` is fixed at stage `l`.
pub fn value_function_penalty(
    solution: &Solution,
    lattice: &LatticeProcess,
    ensemble: &PathEnsemble,
    order: usize,
) -> Result<PenaltyProcess> {
    let nodes = ensemble
        .nodes
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("value-function penalty needs lattice node paths".into()))?;
    let policy = extract_policy(solution, lattice);
    let sim = simulate_policy(&policy, ensemble, &solution.problem.initial_budget)?;
    let n = lattice.n;
    let last = lattice.num_stages();
    let martingale: Vec<Vec<Vec<f64>>> = nodes
        .par_iter()
        .zip(&sim.traces)
        .map(|(path, trace)| {
            let mut m = vec![vec![0.0; n]; last + 1];
            for l in 0..last {
                let y = &trace.states[l + 1];
                let realized = solution.gradient_at(l + 1, path[l + 1], y);
                let mut expected = vec![0.0; n];
                for &(c, p) in &lattice.stages[l][path[l]].children {
                    for (e, g) in expected.iter_mut().zip(solution.gradient_at(l + 1, c, y)) {
                        *e += p * g;
                    }
                }
                for i in 0..n {
                    m[l + 1][i] = m[l][i] - (realized[i] - expected[i]);
                }
            }
            m
        })
        .collect();
    let base = PenaltyProcess::from_martingale(
        ensemble.time_grid.clone(),
        &martingale,
        "value-function gradient".into(),
        ensemble.seed,
    );
    Ok(if order == 0 { base } else { base.raise_order(order) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualEstimate {
    pub upper_bound: f64,
    pub std_error: f64,
    pub pathwise: Vec<f64>,
    pub parameterization: String,
    pub order: usize,
}

impl DualEstimate {
    /// `upper_bound >= primal - 3 * combined standard error`, with a small
    /// absolute slack for rounding.
    pub fn dominates(&self, primal: f64, primal_std_error: f64) -> bool {
        let se = (self.std_error.powi(2) + primal_std_error.powi(2)).sqrt();
        self.upper_bound >= primal - 3.0 * se - 1e-9
    }
}

pub fn dual_estimate(problem: &ProblemSpec, ensemble: &PathEnsemble, penalties: &PenaltyProcess) -> Result<DualEstimate> {
    if penalties.values.len() != ensemble.paths.len() || penalties.time_grid != ensemble.time_grid {
        return Err(Error::InvalidInput("penalties were generated on different paths".into()));
    }
    let pathwise: Vec<f64> = ensemble
        .paths
        .par_iter()
        .zip(&penalties.values)
        .map(|(path, mu)| pathwise_maximize(path, mu, &ensemble.time_grid, problem).map(|r| r.value))
        .collect::<Result<_>>()?;
    let (upper_bound, std_error) = ensemble.mean_and_error(&pathwise);
    Ok(DualEstimate {
        upper_bound,
        std_error,
        pathwise,
        parameterization: penalties.provenance.clone(),
        order: penalties.order,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltySearch {
    pub best: DualEstimate,
    pub best_index: usize,
    /// Upper bound of every evaluated candidate, in family order.
    pub bounds: Vec<f64>,
}

/// Smallest dual estimate over the first `budget` candidates.
pub fn penalty_search(
    problem: &ProblemSpec,
    ensemble: &PathEnsemble,
    family: &[PenaltyProcess],
    budget: usize,
) -> Result<PenaltySearch> {
    let count = budget.min(family.len());
    if count == 0 {
        return Err(Error::InvalidInput("penalty family is empty".into()));
    }
    let mut best: Option<(usize, DualEstimate)> = None;
    let mut bounds = Vec::with_capacity(count);
    for (i, penalties) in family.iter().take(count).enumerate() {
        let est = dual_estimate(problem, ensemble, penalties)?;
        bounds.push(est.upper_bound);
        if best.as_ref().is_none_or(|(_, b)| est.upper_bound < b.upper_bound) {
            best = Some((i, est));
        }
    }
    let (best_index, best) = best.expect("at least one candidate");
    Ok(PenaltySearch {
        best,
        best_index,
        bounds,
    })
}

/// `path_id, pathwise_max, penalty_norm` per path.
pub fn write_dual_csv<W: Write>(estimate: &DualEstimate, penalties: &PenaltyProcess, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["path_id", "pathwise_max", "penalty_norm"])?;
    for (p, v) in estimate.pathwise.iter().enumerate() {
        w.write_record([p.to_string(), v.to_string(), penalties.norm(p).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn dual_summary(estimate: &DualEstimate, primal: Option<(f64, f64)>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "penalty: {}", estimate.parameterization);
    let _ = writeln!(s, "order: {}", estimate.order);
    let _ = writeln!(s, "upper_bound: {}", estimate.upper_bound);
    let _ = writeln!(s, "std_error: {}", estimate.std_error);
    if let Some((value, se)) = primal {
        let _ = writeln!(s, "primal: {value}");
        let _ = writeln!(s, "primal_std_error: {se}");
        let _ = writeln!(s, "gap: {}", estimate.upper_bound - value);
        let _ = writeln!(s, "weak_duality: {}", if estimate.dominates(value, se) { "pass" } else { "FAIL" });
    }
    s
}
