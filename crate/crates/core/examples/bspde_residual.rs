// Fixed-point residual of the backward equation, refined in time and budget.
// The tree is refined consistently: `u = exp(sigma sqrt(dt))`, `d = 1 / u`.

use bspde::model::{FeasibleSet, LatticeProcess, PayoffSpec, ProblemSpec};
use bspde::residual::{residual_report, residual_summary, ResidualOptions};
use bspde::solver::{backward_solve, BudgetGrid};

pub fn run_example() -> bspde::Result<()> {
    let problem = ProblemSpec {
        n: 1,
        horizon: 1.0,
        feasible_set: FeasibleSet::boxed(&[0.5]),
        payoff: PayoffSpec::LinearBox { rate_cap: 1.0 },
        initial_budget: vec![0.0],
    };
    let mut previous = f64::INFINITY;
    for (knots, stages) in [(33, 8), (65, 16), (129, 32)] {
        let up = (0.2 / (stages as f64).sqrt()).exp();
        let lattice = LatticeProcess::binomial(stages, 1.0, &[1.0], &[up], &[1.0 / up], 0.5)?;
        let grid = BudgetGrid::uniform(&problem.feasible_set, knots)?;
        let solution = backward_solve(&problem, &lattice, &grid)?;
        let report = residual_report(&solution, &lattice, ResidualOptions::default())?;
        println!(
            "knots={knots:4} N={stages:3}: J(0,0)={:.5} headline max |r| = {:.3e}, mean = {:.3e}",
            solution.initial_value()?,
            report.headline_max,
            report.headline_mean
        );
        if report.headline_max >= previous {
            return Err(bspde::Error::InvalidInput("residual did not decrease".into()));
        }
        previous = report.headline_max;
        if stages == 8 {
            print!("{}", residual_summary(&report));
        }
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> bspde::Result<()> {
    run_example()
}
