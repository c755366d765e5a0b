//! Backward dynamic programming on a (lattice node x budget grid) mesh.

mod grid;
mod io;
mod policy;

pub use grid::{BudgetGrid, DEFAULT_KNOTS};
pub use io::{read_cache, write_cache, write_solution_csv};
pub use policy::{extract_policy, simulate_policy, simulate_lattice, Policy, PolicyTrace, Simulation};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::hamiltonian::{Continuation, Hamiltonian, OneStep};
use crate::model::{ensure_valid, feasible_rate_box, LatticeProcess, ProblemSpec};

/// Solved quantities for one lattice node at one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeValues {
    /// `J` per grid point; outside points hold extrapolated values.
    pub value: Vec<f64>,
    /// Forward differences, `len = points * n`, point-major.
    pub gradient: Vec<f64>,
    /// One-step maximizer, `len = points * n`; zero at outside points.
    pub rate: Vec<f64>,
}

impl NodeValues {
    fn zeros(points: usize, n: usize) -> Self {
        Self {
            value: vec![0.0; points],
            gradient: vec![0.0; points * n],
            rate: vec![0.0; points * n],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueGrid {
    pub stage: usize,
    pub time: f64,
    pub nodes: Vec<NodeValues>,
}

/// Value grids for stages `0..=N`, indexed by stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub problem: ProblemSpec,
    pub grid: BudgetGrid,
    pub stages: Vec<ValueGrid>,
}

impl Solution {
    pub fn num_stages(&self) -> usize {
        self.stages.len() - 1
    }

    /// `J(stage, node, y)` by multilinear interpolation.
    pub fn value_at(&self, stage: usize, node: usize, y: &[f64]) -> Result<f64> {
        let nodes = &self.stage(stage)?.nodes;
        let values = nodes
            .get(node)
            .ok_or_else(|| Error::InvalidInput(format!("stage {stage} has no node {node}")))?;
        self.grid.interpolate(&values.value, y)
    }

    /// `J(0, y0)`.
    pub fn initial_value(&self) -> Result<f64> {
        self.value_at(0, 0, &self.problem.initial_budget)
    }

    /// Interpolated forward differences at an arbitrary budget state.
    pub fn gradient_at(&self, stage: usize, node: usize, y: &[f64]) -> Vec<f64> {
        let n = self.grid.dim();
        let g = &self.stages[stage].nodes[node].gradient;
        let mut out = vec![0.0; n];
        self.grid.for_each_corner(y, |p, w| {
            for (o, d) in out.iter_mut().zip(&g[p * n..(p + 1) * n]) {
                *o += w * d;
            }
        });
        out
    }

    fn stage(&self, stage: usize) -> Result<&ValueGrid> {
        self.stages
            .get(stage)
            .ok_or_else(|| Error::InvalidInput(format!("no stage {stage} in solution")))
    }
}

/// Expected continuation on the grid, read by the one-step optimizer.
struct GridContinuation<'a> {
    grid: &'a BudgetGrid,
    values: &'a [f64],
}

impl Continuation for GridContinuation<'_> {
    fn value(&self, y: &[f64]) -> f64 {
        self.grid.envelope_clamped(self.values, y)
    }

    fn kinks(&self, y: &[f64], d: &[f64], lo: f64, hi: f64) -> Option<Vec<f64>> {
        Some(self.grid.envelope_kinks(y, d, lo, hi))
    }

    fn fd_step(&self, axis: usize) -> f64 {
        let k = &self.grid.knots[axis];
        k[1] - k[0]
    }
}

/// Solves all stages backward from the zero terminal condition.
pub fn backward_solve(problem: &ProblemSpec, lattice: &LatticeProcess, grid: &BudgetGrid) -> Result<Solution> {
    check_inputs(problem, lattice, grid)?;
    let last = lattice.num_stages();
    let terminal = ValueGrid {
        stage: last,
        time: lattice.time_grid[last],
        nodes: vec![NodeValues::zeros(grid.len(), grid.dim()); lattice.stages[last].len()],
    };
    let stages = roll_back(problem, lattice, grid, terminal)?;
    Ok(Solution {
        problem: problem.clone(),
        grid: grid.clone(),
        stages,
    })
}

/// Rolls back from stored values at `from.stage`, returning stages
/// `0..=from.stage`.
pub fn backward_solve_from(
    problem: &ProblemSpec,
    lattice: &LatticeProcess,
    grid: &BudgetGrid,
    from: &ValueGrid,
) -> Result<Vec<ValueGrid>> {
    check_inputs(problem, lattice, grid)?;
    if from.stage > lattice.num_stages() || from.nodes.len() != lattice.stages[from.stage].len() {
        return Err(Error::InvalidInput(format!(
            "stored stage {} does not match the lattice",
            from.stage
        )));
    }
    roll_back(problem, lattice, grid, from.clone())
}

fn check_inputs(problem: &ProblemSpec, lattice: &LatticeProcess, grid: &BudgetGrid) -> Result<()> {
    ensure_valid(problem)?;
    check_dim(problem.n, lattice.n)?;
    check_dim(problem.n, grid.dim())?;
    let v = lattice.violations();
    if !v.is_empty() {
        return Err(Error::InvalidInput(v.join("; ")));
    }
    if (lattice.horizon() - problem.horizon).abs() > 1e-12 * (1.0 + problem.horizon) {
        return Err(Error::InvalidInput(format!(
            "lattice horizon {} differs from problem horizon {}",
            lattice.horizon(),
            problem.horizon
        )));
    }
    Ok(())
}

fn roll_back(
    problem: &ProblemSpec,
    lattice: &LatticeProcess,
    grid: &BudgetGrid,
    from: ValueGrid,
) -> Result<Vec<ValueGrid>> {
    let hamiltonian = Hamiltonian::new(&problem.payoff)?;
    let n = grid.dim();
    let points = grid.len();
    let box_lo = vec![0.0; n];
    let box_hi: Vec<f64> = grid.knots.iter().map(|k| k[k.len() - 1]).collect();

    let mut out = vec![from];
    for k in (0..out[0].stage).rev() {
        let next = out.last().expect("at least the starting stage");
        let dt = lattice.dt(k);
        let expected: Vec<Vec<f64>> = lattice.stages[k]
            .par_iter()
            .map(|node| {
                let mut acc = vec![0.0; points];
                for &(c, p) in &node.children {
                    for (a, v) in acc.iter_mut().zip(&next.nodes[c].value) {
                        *a += p * v;
                    }
                }
                acc
            })
            .collect();

        let cells: Vec<(f64, Vec<f64>)> = (0..lattice.stages[k].len() * points)
            .into_par_iter()
            .map(|cell| -> Result<(f64, Vec<f64>)> {
                let (j, p) = (cell / points, cell % points);
                if !grid.inside[p] {
                    return Ok((0.0, vec![0.0; n]));
                }
                let y = grid.point(p);
                let mut rates = feasible_rate_box(&problem.feasible_set, &y, dt, &problem.payoff)?;
                rates.clamp_state(&y, dt, &box_lo, &box_hi);
                let continuation = GridContinuation {
                    grid,
                    values: &expected[j],
                };
                let best = OneStep {
                    x: &lattice.stages[k][j].value,
                    dt,
                    y: &y,
                    payoff: &problem.payoff,
                    hamiltonian: &hamiltonian,
                    rates: &rates,
                    continuation: &continuation,
                }
                .solve();
                Ok((best.value, best.maximizer))
            })
            .collect::<Result<_>>()?;

        let nodes = cells
            .chunks(points)
            .map(|chunk| {
                let mut nv = NodeValues::zeros(points, n);
                for (p, (value, rate)) in chunk.iter().enumerate() {
                    nv.value[p] = *value;
                    nv.rate[p * n..(p + 1) * n].copy_from_slice(rate);
                }
                grid.extrapolate(&mut nv.value);
                fill_gradient(grid, &mut nv);
                nv
            })
            .collect();
        out.push(ValueGrid {
            stage: k,
            time: lattice.time_grid[k],
            nodes,
        });
    }
    out.reverse();
    Ok(out)
}

fn fill_gradient(grid: &BudgetGrid, nv: &mut NodeValues) {
    let n = grid.dim();
    for p in 0..grid.len() {
        for a in 0..n {
            nv.gradient[p * n + a] = grid.forward_difference(&nv.value, p, a).0;
        }
    }
}
