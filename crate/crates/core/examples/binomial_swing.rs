// Timing the exercise on a tree: waiting for the price reveal beats
// consuming early, and the brute-force oracle agrees.

use bspde::model::{FeasibleSet, LatticeNode, LatticeProcess, PayoffSpec, ProblemSpec};
use bspde::oracle::{brute_force_dp, uniform_steps};
use bspde::solver::{backward_solve, extract_policy, simulate_lattice, BudgetGrid, DEFAULT_KNOTS};

fn node(x: f64, probability: f64, children: Vec<(usize, f64)>) -> LatticeNode {
    LatticeNode {
        value: vec![x],
        probability,
        children,
    }
}

pub fn run_example() -> bspde::Result<()> {
    // Price 1 today, then 3 or 0 for the rest of the horizon.
    let lattice = LatticeProcess::new(
        vec![0.0, 1.0, 2.0],
        vec![
            vec![node(1.0, 1.0, vec![(0, 0.5), (1, 0.5)])],
            vec![node(3.0, 0.5, vec![(0, 1.0)]), node(0.0, 0.5, vec![(1, 1.0)])],
            vec![node(3.0, 0.5, vec![]), node(0.0, 0.5, vec![])],
        ],
    )?;
    let problem = ProblemSpec {
        n: 1,
        horizon: 2.0,
        feasible_set: FeasibleSet::boxed(&[1.0]),
        payoff: PayoffSpec::LinearBox { rate_cap: 1.0 },
        initial_budget: vec![0.0],
    };
    let grid = BudgetGrid::uniform(&problem.feasible_set, DEFAULT_KNOTS)?;
    let solution = backward_solve(&problem, &lattice, &grid)?;
    let value = solution.initial_value()?;
    let oracle = brute_force_dp(&problem, &lattice, &[uniform_steps(0.1, 1.0)])?;
    println!("solver J(0,0) = {value:.6}, oracle = {:.6}", oracle.value);

    let policy = extract_policy(&solution, &lattice);
    for (stage, x) in [(0, 1.0), (1, 3.0)] {
        println!("stage {stage}, price {x}: rate {:?}", policy.rate(stage, 0, &[0.0])?);
    }
    let sim = simulate_lattice(&policy, &[0.0])?;
    println!("policy payoff over {} scenarios: {:.6}", sim.traces.len(), sim.mean);
    if (value - 1.5).abs() > 1e-6 || (oracle.value - 1.5).abs() > 1e-12 {
        return Err(bspde::Error::InvalidInput("binomial value is not 1.5".into()));
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> bspde::Result<()> {
    run_example()
}
