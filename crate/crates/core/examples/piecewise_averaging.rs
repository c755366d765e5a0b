// Piecewise-constant conditional averaging of the driving process, and the
// convergence of the corresponding values `J_N`. The quadratic payoff
// rewards knowing the price, so coarser information is worth less.

use bspde::model::{average_process, FeasibleSet, LatticeProcess, PayoffSpec, ProblemSpec};
use bspde::solver::{backward_solve, BudgetGrid};

pub fn run_example() -> bspde::Result<()> {
    let problem = ProblemSpec {
        n: 1,
        horizon: 1.0,
        feasible_set: FeasibleSet::boxed(&[2.0]),
        payoff: PayoffSpec::LinearQuadratic {
            penalty_matrix: vec![vec![1.0]],
        },
        initial_budget: vec![0.0],
    };
    let fine = LatticeProcess::binomial(16, 1.0, &[1.0], &[1.15], &[0.87], 0.5)?;
    let grid = BudgetGrid::uniform(&problem.feasible_set, 33)?;
    let reference = backward_solve(&problem, &fine, &grid)?.initial_value()?;
    let sampled = fine.sample_paths(2_000, 5);
    println!("fine lattice (N=16): J = {reference:.5}");
    for coarse in [2, 4, 8] {
        let value = backward_solve(&problem, &fine.coarsen(coarse)?, &grid)?.initial_value()?;
        let averaged = average_process(&sampled, coarse)?;
        let distance = averaged.l2_distance_to(&sampled)?;
        println!(
            "N={coarse:2}: J_N = {value:.5}, |J_N - J| = {:.2e}, E int |X_N - X|^2 = {distance:.3e}",
            (value - reference).abs()
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> bspde::Result<()> {
    run_example()
}
