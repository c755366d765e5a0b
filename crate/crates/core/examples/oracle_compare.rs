// Exhaustive search on a two-commodity instance with a shared budget,
// against the grid solver.

use bspde::model::{FeasibleSet, LatticeProcess, PayoffSpec, ProblemSpec};
use bspde::oracle::{brute_force_dp, oracle_step_bound, uniform_steps};
use bspde::solver::{backward_solve, BudgetGrid};

pub fn run_example() -> bspde::Result<()> {
    let problem = ProblemSpec {
        n: 2,
        horizon: 1.0,
        feasible_set: FeasibleSet::new(vec![vec![1.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]], vec![1.0, 0.75, 0.75]),
        payoff: PayoffSpec::LinearBox { rate_cap: 1.0 },
        initial_budget: vec![0.0, 0.0],
    };
    let lattice = LatticeProcess::binomial(4, 1.0, &[1.0, 1.0], &[1.2, 1.1], &[0.8, 0.9], 0.5)?;
    let solver = backward_solve(&problem, &lattice, &BudgetGrid::uniform(&problem.feasible_set, 33)?)?;
    let j = solver.initial_value()?;
    for step in [0.5, 0.25] {
        let steps = vec![uniform_steps(step, 1.0); 2];
        let oracle = brute_force_dp(&problem, &lattice, &steps)?;
        let bound = oracle_step_bound(&problem, &lattice, &steps)?;
        println!(
            "rate step {step}: oracle {:.5} ({} states), solver {j:.5}, rate-grid bound {bound:.3}",
            oracle.value,
            oracle.entries().len()
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> bspde::Result<()> {
    run_example()
}
