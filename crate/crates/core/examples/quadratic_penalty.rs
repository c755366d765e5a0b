// Linear-quadratic payoff `v^T X - v^T G v` with unbounded rates.

use bspde::hamiltonian::hamiltonian_quadratic;
use bspde::model::{FeasibleSet, LatticeProcess, PayoffSpec, ProblemSpec};
use bspde::solver::{backward_solve, extract_policy, BudgetGrid, DEFAULT_KNOTS};

pub fn run_example() -> bspde::Result<()> {
    let g = vec![vec![1.0]];
    let h = hamiltonian_quadratic(&[2.0], &[0.0], &g)?;
    println!("H(2, 0) = {} at v = {:?}", h.value, h.maximizer);

    // Slack budget: the pointwise optimum v = X / (2G) = 1 is feasible.
    let slack = ProblemSpec {
        n: 1,
        horizon: 1.0,
        feasible_set: FeasibleSet::boxed(&[10.0]),
        payoff: PayoffSpec::LinearQuadratic { penalty_matrix: g.clone() },
        initial_budget: vec![0.0],
    };
    let lattice = LatticeProcess::constant(&[2.0], 4, 1.0)?;
    let solution = backward_solve(&slack, &lattice, &BudgetGrid::uniform(&slack.feasible_set, DEFAULT_KNOTS)?)?;
    let value = solution.initial_value()?;
    let rate = extract_policy(&solution, &lattice).rate(0, 0, &[0.0])?;
    println!("slack budget: J(0,0) = {value:.6} (exact 1), v(0) = {:.4}", rate[0]);

    // Binding budget 0.5: spread evenly, v = 0.5 and J = 2 * 0.5 - 0.25 = 0.75.
    let tight = ProblemSpec {
        feasible_set: FeasibleSet::boxed(&[0.5]),
        ..slack
    };
    let solution = backward_solve(&tight, &lattice, &BudgetGrid::uniform(&tight.feasible_set, DEFAULT_KNOTS)?)?;
    let tight_value = solution.initial_value()?;
    println!("budget 0.5: J(0,0) = {tight_value:.6} (exact 0.75)");
    if (value - 1.0).abs() > 1e-3 || (tight_value - 0.75).abs() > 1e-3 {
        return Err(bspde::Error::InvalidInput("quadratic values off".into()));
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> bspde::Result<()> {
    run_example()
}
