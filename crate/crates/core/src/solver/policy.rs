use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Solution;
use crate::error::{Error, Result};
use crate::model::{feasible_rate_box, LatticeProcess, PathEnsemble, RateSet};
use crate::tolerance;

/// Feedback rule `(stage, node, y) -> v` read from a solution.
#[derive(Debug, Clone, Copy)]
pub struct Policy<'a> {
    pub solution: &'a Solution,
    pub lattice: &'a LatticeProcess,
}

pub fn extract_policy<'a>(solution: &'a Solution, lattice: &'a LatticeProcess) -> Policy<'a> {
    Policy { solution, lattice }
}

impl Policy<'_> {
    fn rate_set(&self, stage: usize, y: &[f64]) -> Result<RateSet> {
        let problem = &self.solution.problem;
        let dt = self.lattice.dt(stage);
        let mut rates = feasible_rate_box(&problem.feasible_set, y, dt, &problem.payoff)?;
        let grid = &self.solution.grid;
        let lo = vec![0.0; grid.dim()];
        let hi: Vec<f64> = grid.knots.iter().map(|k| k[k.len() - 1]).collect();
        rates.clamp_state(y, dt, &lo, &hi);
        Ok(rates)
    }

    /// Stored maximizers blended over the inside corners of the cell around
    /// `y` and projected onto the admissible rates. Falls back to the nearest
    /// corner's maximizer when the blend does not survive projection.
    pub fn rate(&self, stage: usize, node: usize, y: &[f64]) -> Result<Vec<f64>> {
        let grid = &self.solution.grid;
        let n = grid.dim();
        let rates = self.rate_set(stage, y)?;
        let stored = &self.solution.stages[stage].nodes[node].rate;
        let mut blend = vec![0.0; n];
        let mut total = 0.0;
        let mut nearest: Option<(usize, f64)> = None;
        grid.for_each_corner(y, |p, w| {
            if grid.inside[p] {
                total += w;
                for (b, v) in blend.iter_mut().zip(&stored[p * n..(p + 1) * n]) {
                    *b += w * v;
                }
                if nearest.is_none_or(|(_, best)| w > best) {
                    nearest = Some((p, w));
                }
            }
        });
        if total > 0.0 {
            blend.iter_mut().for_each(|b| *b /= total);
            let v = rates.project(&blend);
            if rates.contains(&v, tolerance::FEASIBILITY) {
                return Ok(v);
            }
        }
        if let Some((p, _)) = nearest {
            let v = rates.project(&stored[p * n..(p + 1) * n]);
            if rates.contains(&v, tolerance::FEASIBILITY) {
                return Ok(v);
            }
        }
        Ok(vec![0.0; n])
    }
}

/// States, rates and running payoffs along one path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTrace {
    pub states: Vec<Vec<f64>>,
    pub rates: Vec<Vec<f64>>,
    pub payoffs: Vec<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Simulation {
    pub traces: Vec<PolicyTrace>,
    pub mean: f64,
    pub std_error: f64,
}

/// Runs the policy along every path of a node-carrying ensemble.
pub fn simulate_policy(policy: &Policy, ensemble: &PathEnsemble, y0: &[f64]) -> Result<Simulation> {
    let nodes = ensemble
        .nodes
        .as_ref()
        .ok_or_else(|| Error::InvalidInput("policy simulation needs lattice node paths".into()))?;
    let problem = &policy.solution.problem;
    let last = policy.lattice.num_stages();
    if ensemble.num_stages() != last {
        return Err(Error::InvalidInput("ensemble and lattice differ in stage count".into()));
    }
    let traces: Vec<PolicyTrace> = nodes
        .par_iter()
        .map(|path| {
            let mut y = y0.to_vec();
            let mut trace = PolicyTrace {
                states: vec![y.clone()],
                rates: Vec::with_capacity(last),
                payoffs: Vec::with_capacity(last),
                total: 0.0,
            };
            for (k, &node) in path.iter().enumerate().take(last) {
                let dt = policy.lattice.dt(k);
                let v = policy.rate(k, node, &y)?;
                let payoff = dt * problem.payoff.running(&policy.lattice.stages[k][node].value, &v);
                y.iter_mut().zip(&v).for_each(|(y, v)| *y += dt * v);
                if !problem.feasible_set.contains_with_slack(&y, tolerance::FEASIBILITY) {
                    return Err(Error::Infeasible(format!("policy left the feasible set at stage {k}: {y:?}")));
                }
                trace.total += payoff;
                trace.payoffs.push(payoff);
                trace.rates.push(v);
                trace.states.push(y.clone());
            }
            Ok(trace)
        })
        .collect::<Result<_>>()?;
    let totals: Vec<f64> = traces.iter().map(|t| t.total).collect();
    let (mean, std_error) = ensemble.mean_and_error(&totals);
    Ok(Simulation {
        traces,
        mean,
        std_error,
    })
}

/// Exact expected payoff of the policy by full lattice enumeration.
pub fn simulate_lattice(policy: &Policy, y0: &[f64]) -> Result<Simulation> {
    simulate_policy(policy, &policy.lattice.enumerate_paths()?, y0)
}

#[cfg(test)]
mod tests {
    use super::super::tests::{linear_problem, two_stage_binomial};
    use super::super::{backward_solve, BudgetGrid, DEFAULT_KNOTS};
    use super::*;
    use crate::model::{FeasibleSet, PayoffSpec, ProblemSpec};

    #[test]
    fn deterministic_policy_consumes_at_full_rate() {
        let problem = linear_problem(1.0);
        let lattice = LatticeProcess::constant(&[2.0], 4, 1.0).unwrap();
        let grid = BudgetGrid::uniform(&problem.feasible_set, DEFAULT_KNOTS).unwrap();
        let sol = backward_solve(&problem, &lattice, &grid).unwrap();
        let policy = extract_policy(&sol, &lattice);
        let sim = simulate_lattice(&policy, &[0.0]).unwrap();
        assert_eq!(sim.mean, 2.0);
        assert!(sim.traces[0].rates.iter().all(|v| v[0] == 1.0));
        assert_eq!(policy.rate(3, 0, &[1.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn binomial_policy_attains_value() {
        let (problem, lattice) = two_stage_binomial();
        let grid = BudgetGrid::uniform(&problem.feasible_set, DEFAULT_KNOTS).unwrap();
        let sol = backward_solve(&problem, &lattice, &grid).unwrap();
        let sim = simulate_lattice(&extract_policy(&sol, &lattice), &[0.0]).unwrap();
        assert!((sim.mean - 1.5).abs() < 1e-12);
        assert_eq!(sim.std_error, 0.0);
        assert!(sim.mean <= sol.initial_value().unwrap() + 1e-6);
    }

    #[test]
    fn quadratic_policy_matches_closed_form_rate() {
        let problem = ProblemSpec {
            n: 1,
            horizon: 1.0,
            feasible_set: FeasibleSet::boxed(&[10.0]),
            payoff: PayoffSpec::LinearQuadratic {
                penalty_matrix: vec![vec![1.0]],
            },
            initial_budget: vec![0.0],
        };
        let lattice = LatticeProcess::constant(&[2.0], 4, 1.0).unwrap();
        let grid = BudgetGrid::uniform(&problem.feasible_set, DEFAULT_KNOTS).unwrap();
        let sol = backward_solve(&problem, &lattice, &grid).unwrap();
        let sim = simulate_lattice(&extract_policy(&sol, &lattice), &[0.0]).unwrap();
        for v in &sim.traces[0].rates {
            assert!((v[0] - 1.0).abs() < 5e-3, "{v:?}");
        }
    }

    #[test]
    fn sampled_simulation_reports_error() {
        let problem = ProblemSpec {
            horizon: 1.0,
            ..linear_problem(0.5)
        };
        let lattice = LatticeProcess::binomial(4, 1.0, &[1.0], &[1.2], &[0.8], 0.5).unwrap();
        let grid = BudgetGrid::uniform(&problem.feasible_set, 17).unwrap();
        let sol = backward_solve(&problem, &lattice, &grid).unwrap();
        let policy = extract_policy(&sol, &lattice);
        let sim = simulate_policy(&policy, &lattice.sample_paths(500, 3), &[0.0]).unwrap();
        let exact = simulate_lattice(&policy, &[0.0]).unwrap();
        assert!(sim.std_error > 0.0);
        assert!((sim.mean - exact.mean).abs() < 4.0 * sim.std_error);
    }
}
