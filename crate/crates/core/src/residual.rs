//! Fixed-point residual of the first-order backward equation
//! `J(t, y) = E[ int_t^T H(X(s), D+_y J(s, y)) ds | F_t ]` on a solved grid.

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::hamiltonian::Hamiltonian;
use crate::model::LatticeProcess;
use crate::solver::{extract_policy, Solution};

/// Where the gradient inside the stage integral is sampled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Quadrature {
    /// Left limit at the end of each step: `D+` of `E[J(t_{k+1}, y) | node]`.
    /// With `X` constant over the step this makes the one-step recursion
    /// telescope exactly wherever the continuation is locally affine.
    #[default]
    RightLimit,
    /// `D+ J(t_k, y)` at the start of each step.
    LeftEndpoint,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualOptions {
    pub quadrature: Quadrature,
    /// Evaluate the gradient along the optimally controlled budget path
    /// instead of at the fixed starting budget (diagnostic).
    pub follow_trajectory: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualCell {
    pub stage: usize,
    pub node: usize,
    pub point: usize,
    pub y: Vec<f64>,
    pub value: f64,
    pub rhs: f64,
    pub residual: f64,
    /// False for cells next to the feasible-set boundary or the grid edges.
    pub interior: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageResidual {
    pub stage: usize,
    pub max_abs: f64,
    pub mean_abs: f64,
    pub boundary_max_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub options: ResidualOptions,
    pub cells: Vec<ResidualCell>,
    pub by_stage: Vec<StageResidual>,
    /// Maximum and mean `|r|` over interior cells of all stages.
    pub headline_max: f64,
    pub headline_mean: f64,
    pub boundary_max: f64,
    pub interior_cells: usize,
}

struct Rhs<'a> {
    solution: &'a Solution,
    lattice: &'a LatticeProcess,
    hamiltonian: Hamiltonian,
    quadrature: Quadrature,
}

impl<'a> Rhs<'a> {
    fn new(solution: &'a Solution, lattice: &'a LatticeProcess, quadrature: Quadrature) -> Result<Self> {
        check_dim(solution.grid.dim(), lattice.n)?;
        if solution.stages.len() != lattice.stages.len()
            || solution.stages.iter().zip(&lattice.stages).any(|(s, l)| s.nodes.len() != l.len())
        {
            return Err(Error::InvalidInput("solution does not match the lattice".into()));
        }
        Ok(Self {
            solution,
            lattice,
            hamiltonian: Hamiltonian::new(&solution.problem.payoff)?,
            quadrature,
        })
    }

    fn gradient(&self, stage: usize, node: usize, y: &[f64]) -> Vec<f64> {
        match self.quadrature {
            Quadrature::LeftEndpoint => self.solution.gradient_at(stage, node, y),
            Quadrature::RightLimit => {
                let mut acc = vec![0.0; y.len()];
                for &(c, p) in &self.lattice.stages[stage][node].children {
                    for (a, g) in acc.iter_mut().zip(self.solution.gradient_at(stage + 1, c, y)) {
                        *a += p * g;
                    }
                }
                acc
            }
        }
    }

    /// `dt_m H(X, D+J)` for one stage and node.
    fn integrand(&self, stage: usize, node: usize, y: &[f64]) -> f64 {
        let x = &self.lattice.stages[stage][node].value;
        self.lattice.dt(stage) * self.hamiltonian.eval(x, &self.gradient(stage, node, y)).value
    }

    fn fixed(&self, stage: usize, node: usize, y: &[f64]) -> f64 {
        let last = self.lattice.num_stages();
        let mut dist = vec![(node, 1.0)];
        let mut total = 0.0;
        for m in stage..last {
            let mut next = vec![0.0; self.lattice.stages[m + 1].len()];
            for &(j, w) in &dist {
                total += w * self.integrand(m, j, y);
                for &(c, p) in &self.lattice.stages[m][j].children {
                    next[c] += w * p;
                }
            }
            dist = next
                .into_iter()
                .enumerate()
                .filter(|(_, w)| *w > 0.0)
                .collect();
        }
        total
    }

    fn along_trajectory(&self, stage: usize, node: usize, y: &[f64]) -> Result<f64> {
        if stage == self.lattice.num_stages() {
            return Ok(0.0);
        }
        let policy = extract_policy(self.solution, self.lattice);
        let dt = self.lattice.dt(stage);
        let v = policy.rate(stage, node, y)?;
        let next: Vec<f64> = y.iter().zip(&v).map(|(y, v)| y + dt * v).collect();
        let mut total = self.integrand(stage, node, y);
        for &(c, p) in &self.lattice.stages[stage][node].children {
            if p > 0.0 {
                total += p * self.along_trajectory(stage + 1, c, &next)?;
            }
        }
        Ok(total)
    }
}

/// Right-hand side of the backward equation at one cell, by forward push of
/// node probabilities from `(stage, node)`.
pub fn evaluate_rhs(
    solution: &Solution,
    lattice: &LatticeProcess,
    stage: usize,
    node: usize,
    y: &[f64],
    options: ResidualOptions,
) -> Result<f64> {
    let rhs = Rhs::new(solution, lattice, options.quadrature)?;
    check_dim(solution.grid.dim(), y.len())?;
    if stage > lattice.num_stages() || node >= lattice.stages[stage].len() {
        return Err(Error::InvalidInput(format!("no node {node} at stage {stage}")));
    }
    if options.follow_trajectory {
        rhs.along_trajectory(stage, node, y)
    } else {
        Ok(rhs.fixed(stage, node, y))
    }
}

/// Residual `J - RHS` at every inside cell. With fixed `y` the right-hand
/// side is accumulated by one backward sweep over the lattice.
pub fn residual_report(solution: &Solution, lattice: &LatticeProcess, options: ResidualOptions) -> Result<ResidualReport> {
    let rhs = Rhs::new(solution, lattice, options.quadrature)?;
    let grid = &solution.grid;
    let inside: Vec<usize> = (0..grid.len()).filter(|p| grid.inside[*p]).collect();
    let points: Vec<Vec<f64>> = inside.iter().map(|p| grid.point(*p)).collect();
    let last = lattice.num_stages();

    let mut table: Vec<Vec<Vec<f64>>> = vec![Vec::new(); last + 1];
    table[last] = vec![vec![0.0; inside.len()]; lattice.stages[last].len()];
    for m in (0..last).rev() {
        table[m] = if options.follow_trajectory {
            (0..lattice.stages[m].len())
                .into_par_iter()
                .map(|j| points.iter().map(|y| rhs.along_trajectory(m, j, y)).collect())
                .collect::<Result<_>>()?
        } else {
            let later = &table[m + 1];
            (0..lattice.stages[m].len())
                .into_par_iter()
                .map(|j| {
                    points
                        .iter()
                        .enumerate()
                        .map(|(q, y)| {
                            let tail: f64 = lattice.stages[m][j].children.iter().map(|&(c, p)| p * later[c][q]).sum();
                            rhs.integrand(m, j, y) + tail
                        })
                        .collect()
                })
                .collect()
        };
    }

    let mut cells = Vec::new();
    for (m, stage_rhs) in table.iter().enumerate() {
        for (j, node_rhs) in stage_rhs.iter().enumerate() {
            let values = &solution.stages[m].nodes[j].value;
            for (q, &p) in inside.iter().enumerate() {
                let value = values[p];
                cells.push(ResidualCell {
                    stage: m,
                    node: j,
                    point: p,
                    y: points[q].clone(),
                    value,
                    rhs: node_rhs[q],
                    residual: value - node_rhs[q],
                    interior: grid.is_interior(p),
                });
            }
        }
    }
    Ok(summarize(options, cells, last))
}

fn summarize(options: ResidualOptions, cells: Vec<ResidualCell>, last: usize) -> ResidualReport {
    let mut by_stage: Vec<StageResidual> = (0..=last)
        .map(|stage| StageResidual {
            stage,
            max_abs: 0.0,
            mean_abs: 0.0,
            boundary_max_abs: 0.0,
        })
        .collect();
    let mut counts = vec![0usize; last + 1];
    let (mut max, mut sum, mut boundary, mut interior) = (0.0f64, 0.0, 0.0f64, 0usize);
    for c in &cells {
        let r = c.residual.abs();
        let s = &mut by_stage[c.stage];
        if c.interior {
            s.max_abs = s.max_abs.max(r);
            s.mean_abs += r;
            counts[c.stage] += 1;
            max = max.max(r);
            sum += r;
            interior += 1;
        } else {
            s.boundary_max_abs = s.boundary_max_abs.max(r);
            boundary = boundary.max(r);
        }
    }
    for (s, n) in by_stage.iter_mut().zip(&counts) {
        if *n > 0 {
            s.mean_abs /= *n as f64;
        }
    }
    ResidualReport {
        options,
        cells,
        by_stage,
        headline_max: max,
        headline_mean: if interior > 0 { sum / interior as f64 } else { 0.0 },
        boundary_max: boundary,
        interior_cells: interior,
    }
}

/// `stage, node_id, y_1..y_n, J, rhs, residual, interior` per cell.
pub fn write_residual_csv<W: Write>(report: &ResidualReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let n = report.cells.first().map_or(0, |c| c.y.len());
    let mut header = vec!["stage".to_string(), "node_id".to_string()];
    header.extend((1..=n).map(|i| format!("y_{i}")));
    header.extend(["J", "rhs", "residual", "interior"].map(String::from));
    w.write_record(&header)?;
    for c in &report.cells {
        let mut row = vec![c.stage.to_string(), c.node.to_string()];
        row.extend(c.y.iter().map(f64::to_string));
        row.extend([
            c.value.to_string(),
            c.rhs.to_string(),
            c.residual.to_string(),
            c.interior.to_string(),
        ]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn residual_summary(report: &ResidualReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "quadrature: {:?}", report.options.quadrature);
    let _ = writeln!(s, "follow_trajectory: {}", report.options.follow_trajectory);
    let _ = writeln!(s, "interior_cells: {}", report.interior_cells);
    let _ = writeln!(s, "headline_max_abs: {:e}", report.headline_max);
    let _ = writeln!(s, "headline_mean_abs: {:e}", report.headline_mean);
    let _ = writeln!(s, "boundary_max_abs: {:e}", report.boundary_max);
    let _ = writeln!(s, "stage,max_abs,mean_abs,boundary_max_abs");
    for st in &report.by_stage {
        let _ = writeln!(s, "{},{:e},{:e},{:e}", st.stage, st.max_abs, st.mean_abs, st.boundary_max_abs);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FeasibleSet, PayoffSpec, ProblemSpec};
    use crate::solver::{backward_solve, BudgetGrid, DEFAULT_KNOTS};

    fn deterministic(knots: usize, stages: usize) -> (Solution, LatticeProcess) {
        let problem = ProblemSpec {
            n: 1,
            horizon: 1.0,
            feasible_set: FeasibleSet::boxed(&[1.0]),
            payoff: PayoffSpec::LinearBox { rate_cap: 1.0 },
            initial_budget: vec![0.0],
        };
        let lattice = LatticeProcess::constant(&[2.0], stages, 1.0).unwrap();
        let grid = BudgetGrid::uniform(&problem.feasible_set, knots).unwrap();
        (backward_solve(&problem, &lattice, &grid).unwrap(), lattice)
    }

    #[test]
    fn terminal_stage_is_exactly_zero() {
        let (sol, lattice) = deterministic(17, 4);
        let report = residual_report(&sol, &lattice, ResidualOptions::default()).unwrap();
        assert!(report.cells.iter().filter(|c| c.stage == 4).all(|c| c.residual == 0.0));
        assert_eq!(evaluate_rhs(&sol, &lattice, 4, 0, &[0.5], ResidualOptions::default()).unwrap(), 0.0);
    }

    #[test]
    fn slack_budget_cells_match_remaining_capacity() {
        // J(t, y) = 2 min(T - t, 1 - y); with y <= t the budget never binds
        // and the right-hand side is 2 (T - t).
        let (sol, lattice) = deterministic(DEFAULT_KNOTS, 4);
        for k in 0..4 {
            let t = 0.25 * k as f64;
            for y in [0.0, t * 0.5, t] {
                let rhs = evaluate_rhs(&sol, &lattice, k, 0, &[y], ResidualOptions::default()).unwrap();
                assert!((rhs - 2.0 * (1.0 - t)).abs() < 1e-12, "k {k} y {y}: {rhs}");
            }
        }
    }

    #[test]
    fn sweep_matches_forward_push() {
        let (sol, lattice) = deterministic(17, 4);
        for quadrature in [Quadrature::RightLimit, Quadrature::LeftEndpoint] {
            let options = ResidualOptions {
                quadrature,
                follow_trajectory: false,
            };
            let report = residual_report(&sol, &lattice, options).unwrap();
            for c in &report.cells {
                let direct = evaluate_rhs(&sol, &lattice, c.stage, c.node, &c.y, options).unwrap();
                assert!((direct - c.rhs).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_refinement_is_first_order() {
        let heads: Vec<f64> = [(17, 4), (33, 8), (65, 16)]
            .iter()
            .map(|&(k, n)| {
                let (sol, lattice) = deterministic(k, n);
                residual_report(&sol, &lattice, ResidualOptions::default()).unwrap().headline_max
            })
            .collect();
        for w in heads.windows(2) {
            let ratio = w[0] / w[1];
            assert!((1.5..=3.0).contains(&ratio), "{heads:?}");
        }
    }

    #[test]
    fn two_stage_binomial_root_cell() {
        let lattice = LatticeProcess::binomial(2, 2.0, &[1.0], &[3.0], &[1e-9], 0.5).unwrap();
        let problem = ProblemSpec {
            n: 1,
            horizon: 2.0,
            feasible_set: FeasibleSet::boxed(&[1.0]),
            payoff: PayoffSpec::LinearBox { rate_cap: 1.0 },
            initial_budget: vec![0.0],
        };
        let grid = BudgetGrid::uniform(&problem.feasible_set, DEFAULT_KNOTS).unwrap();
        let sol = backward_solve(&problem, &lattice, &grid).unwrap();
        let j = sol.initial_value().unwrap();
        let rhs = evaluate_rhs(&sol, &lattice, 0, 0, &[0.0], ResidualOptions::default()).unwrap();
        assert!((j - rhs).abs() <= 2e-2, "{j} vs {rhs}");
        // The literal start-of-step rule samples the kink of J(t_1, .) at y = 0
        // and loses the whole second stage.
        let left = ResidualOptions {
            quadrature: Quadrature::LeftEndpoint,
            follow_trajectory: false,
        };
        assert!(evaluate_rhs(&sol, &lattice, 0, 0, &[0.0], left).unwrap() < 0.1);
    }

    #[test]
    fn trajectory_mode_runs() {
        let (sol, lattice) = deterministic(17, 4);
        let options = ResidualOptions {
            follow_trajectory: true,
            ..Default::default()
        };
        let report = residual_report(&sol, &lattice, options).unwrap();
        // Along the optimal path the budget is consumed at full rate, so the
        // integrand stays 2 dt at every stage from y = 0.
        let rhs = evaluate_rhs(&sol, &lattice, 0, 0, &[0.0], options).unwrap();
        assert!((rhs - 2.0).abs() < 1e-12, "{rhs}");
        assert_eq!(report.cells.len(), 5 * 17);
    }
}
