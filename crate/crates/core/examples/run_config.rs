// Driving the library from a TOML configuration, as the command line does.

use std::path::Path;

use bspde::config::RunConfig;

const CONFIG: &str = r#"
seed = 42

[problem]
dimension = 2
horizon = 1.0
constraint_matrix = [[1.0, 1.0]]
constraint_bounds = [1.0]
payoff = { kind = "linear_quadratic", penalty_matrix = [[1.0, 0.2], [0.2, 1.0]] }

[process]
kind = "binomial"
stages = 3
x0 = [1.0, 1.5]
up = [1.2, 1.1]
down = [0.8, 0.9]
p_up = 0.5

[solver]
knots = 17
"#;

pub fn run_example() -> bspde::Result<()> {
    let config = RunConfig::parse(CONFIG, Path::new("."))?;
    let problems = config.validate();
    if !problems.is_empty() {
        return Err(bspde::Error::Config(problems.join("; ")));
    }
    let problem = config.problem()?;
    let lattice = config.lattice("example")?;
    let grid = config.grid(&problem)?;
    let solution = bspde::solver::backward_solve(&problem, &lattice, &grid)?;
    println!("J(0, 0) = {:.6} on a {:?} grid", solution.initial_value()?, grid.sizes());
    Ok(())
}

#[allow(dead_code)]
fn main() -> bspde::Result<()> {
    run_example()
}
