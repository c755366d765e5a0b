// A single price scenario: with `X = c` constant the value is `c min(L T, alpha)`.

use bspde::model::{FeasibleSet, LatticeProcess, PayoffSpec, ProblemSpec};
use bspde::solver::{backward_solve, extract_policy, simulate_lattice, BudgetGrid};

pub fn run_example() -> bspde::Result<()> {
    for (alpha, price) in [(1.0, 2.0), (0.5, 2.0), (2.0, 3.0)] {
        let problem = ProblemSpec {
            n: 1,
            horizon: 1.0,
            feasible_set: FeasibleSet::boxed(&[alpha]),
            payoff: PayoffSpec::LinearBox { rate_cap: 1.0 },
            initial_budget: vec![0.0],
        };
        let lattice = LatticeProcess::constant(&[price], 4, 1.0)?;
        let grid = BudgetGrid::uniform(&problem.feasible_set, 65)?;
        let solution = backward_solve(&problem, &lattice, &grid)?;
        let value = solution.initial_value()?;
        let exact = price * alpha.min(1.0);

        let policy = extract_policy(&solution, &lattice);
        let sim = simulate_lattice(&policy, &problem.initial_budget)?;
        let rates: Vec<f64> = sim.traces[0].rates.iter().map(|v| v[0]).collect();
        println!("alpha={alpha} X={price}: J(0,0)={value:.6} exact={exact:.6} policy rates {rates:?}");
        if (value - exact).abs() > 1e-6 || (sim.mean - exact).abs() > 1e-6 {
            return Err(bspde::Error::InvalidInput(format!("expected {exact}, got {value}")));
        }
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> bspde::Result<()> {
    run_example()
}
