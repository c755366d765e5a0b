// Martingale-duality upper bounds of increasing quality, and the effect of
// the integration order of the penalty.

use bspde::dual::{
    dual_estimate, generate_martingale_penalties, penalty_search, value_function_penalty, MartingaleSpec,
};
use bspde::model::{FeasibleSet, LatticeProcess, PayoffSpec, ProblemSpec};
use bspde::solver::{backward_solve, BudgetGrid};

pub fn run_example() -> bspde::Result<()> {
    let problem = ProblemSpec {
        n: 1,
        horizon: 1.0,
        feasible_set: FeasibleSet::boxed(&[0.5]),
        payoff: PayoffSpec::LinearBox { rate_cap: 1.0 },
        initial_budget: vec![0.0],
    };
    let lattice = LatticeProcess::binomial(6, 1.0, &[1.0], &[1.2], &[0.85], 0.5)?;
    let solution = backward_solve(&problem, &lattice, &BudgetGrid::uniform(&problem.feasible_set, 65)?)?;
    let primal = solution.initial_value()?;
    let paths = lattice.enumerate_paths()?;
    println!("primal J(0,0) = {primal:.5} on {} exact paths", paths.paths.len());

    for order in 0..=2 {
        let zero = generate_martingale_penalties(&paths, Some(&lattice), &MartingaleSpec::Zero, order)?;
        let identity = generate_martingale_penalties(&paths, Some(&lattice), &MartingaleSpec::identity(1), order)?;
        let family = MartingaleSpec::random_family(1, 20, 1.0, 11)
            .iter()
            .map(|spec| generate_martingale_penalties(&paths, Some(&lattice), spec, order))
            .collect::<bspde::Result<Vec<_>>>()?;
        let vf = value_function_penalty(&solution, &lattice, &paths, order)?;
        let z = dual_estimate(&problem, &paths, &zero)?.upper_bound;
        let i = dual_estimate(&problem, &paths, &identity)?.upper_bound;
        let f = penalty_search(&problem, &paths, &family, family.len())?.best.upper_bound;
        let v = dual_estimate(&problem, &paths, &vf)?;
        println!("order {order}: zero {z:.5}  identity {i:.5}  best of 20 {f:.5}  value-function {:.5}", v.upper_bound);
        for bound in [z, i, f, v.upper_bound] {
            if bound < primal - 1e-9 {
                return Err(bspde::Error::InvalidInput("weak duality violated".into()));
            }
        }
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> bspde::Result<()> {
    run_example()
}
