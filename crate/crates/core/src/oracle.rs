//! Exhaustive dynamic programming over a finite rate grid, for tiny instances.
//!
//! Budgets are tracked exactly as integer multiples of a quantum, so there
//! is no interpolation anywhere.

use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::hamiltonian::QuadraticHamiltonian;
use crate::model::{ensure_valid, LatticeProcess, PayoffSpec, ProblemSpec};
use crate::tolerance;

pub const MAX_DIM: usize = 3;
pub const MAX_STAGES: usize = 8;
pub const MAX_CANDIDATES: usize = 41;

/// Largest multiple of a quantum accepted for a single rate or step length.
const MAX_MULTIPLE: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleEntry {
    pub stage: usize,
    pub node: usize,
    pub units: Vec<i64>,
    pub budget: Vec<f64>,
    pub value: f64,
    pub control: Vec<f64>,
}

type Key = (usize, usize, Vec<i64>);

#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub rate_steps: Vec<Vec<f64>>,
    /// Budget consumed per unit, per coordinate.
    pub quantum: Vec<f64>,
    /// `J(0, y0)` on the rate grid.
    pub value: f64,
    initial_budget: Vec<f64>,
    rate_units: Vec<Vec<i64>>,
    step_units: Vec<i64>,
    table: HashMap<Key, (f64, Vec<usize>)>,
}

impl OracleSolution {
    pub fn budget(&self, units: &[i64]) -> Vec<f64> {
        units
            .iter()
            .zip(&self.quantum)
            .zip(&self.initial_budget)
            .map(|((u, q), y0)| y0 + *u as f64 * q)
            .collect()
    }

    /// Value and optimal rate at a reached state.
    pub fn lookup(&self, stage: usize, node: usize, units: &[i64]) -> Option<(f64, Vec<f64>)> {
        self.table
            .get(&(stage, node, units.to_vec()))
            .map(|(v, c)| (*v, self.control(c)))
    }

    fn control(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().zip(&self.rate_steps).map(|(i, s)| s[*i]).collect()
    }

    /// Every reached state, sorted by stage, node and budget units.
    pub fn entries(&self) -> Vec<OracleEntry> {
        let mut out: Vec<OracleEntry> = self
            .table
            .iter()
            .map(|((stage, node, units), (value, c))| OracleEntry {
                stage: *stage,
                node: *node,
                units: units.clone(),
                budget: self.budget(units),
                value: *value,
                control: self.control(c),
            })
            .collect();
        out.sort_by(|a, b| (a.stage, a.node, &a.units).cmp(&(b.stage, b.node, &b.units)));
        out
    }

    /// Optimal rates along one lattice path (node index per stage) from the
    /// initial budget, with the payoff they realize.
    pub fn reconstruct(&self, lattice: &LatticeProcess, problem: &ProblemSpec, nodes: &[usize]) -> Result<(Vec<Vec<f64>>, f64)> {
        let last = self.step_units.len();
        let mut units = vec![0i64; self.quantum.len()];
        let mut controls = Vec::with_capacity(last);
        let mut payoff = 0.0;
        for k in 0..last {
            let (_, idx) = self
                .table
                .get(&(k, nodes[k], units.clone()))
                .ok_or_else(|| Error::InvalidInput(format!("state at stage {k} was not reached")))?;
            for (i, c) in idx.iter().enumerate() {
                units[i] += self.rate_units[i][*c] * self.step_units[k];
            }
            let control = self.control(idx);
            payoff += lattice.dt(k) * problem.payoff.running(&lattice.stages[k][nodes[k]].value, &control);
            controls.push(control);
        }
        Ok((controls, payoff))
    }
}

/// Float quantum `g` with every value an integer multiple of it.
fn float_gcd(values: &[f64]) -> Option<f64> {
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return Some(1.0);
    }
    let tol = 1e-9 * scale;
    let mut g = 0.0f64;
    for v in values.iter().map(|v| v.abs()).filter(|v| *v > tol) {
        let (mut a, mut b) = (g.max(v), g.min(v));
        while b > tol {
            let r = a % b;
            a = b;
            b = if r > b - tol { 0.0 } else { r };
        }
        g = a;
    }
    let ok = values.iter().all(|v| {
        let m = v / g;
        m.abs() <= MAX_MULTIPLE && (m - m.round()).abs() <= 1e-7
    });
    ok.then_some(g)
}

fn multiples(values: &[f64], g: f64) -> Vec<i64> {
    values.iter().map(|v| (v / g).round() as i64).collect()
}

fn check_caps(problem: &ProblemSpec, lattice: &LatticeProcess, rate_steps: &[Vec<f64>]) -> Result<()> {
    if problem.n > MAX_DIM {
        return Err(Error::CapsExceeded(format!("dimension {} > {MAX_DIM}", problem.n)));
    }
    if lattice.num_stages() > MAX_STAGES {
        return Err(Error::CapsExceeded(format!("{} stages > {MAX_STAGES}", lattice.num_stages())));
    }
    if let Some(steps) = rate_steps.iter().find(|s| s.len() > MAX_CANDIDATES) {
        return Err(Error::CapsExceeded(format!(
            "{} candidate rates > {MAX_CANDIDATES}",
            steps.len()
        )));
    }
    Ok(())
}

/// `J(0, y0)` and the full value table by exhaustive search over
/// `rate_steps[i]` for coordinate `i`.
pub fn brute_force_dp(problem: &ProblemSpec, lattice: &LatticeProcess, rate_steps: &[Vec<f64>]) -> Result<OracleSolution> {
    ensure_valid(problem)?;
    check_dim(problem.n, lattice.n)?;
    check_dim(problem.n, rate_steps.len())?;
    check_caps(problem, lattice, rate_steps)?;
    let (lo, hi) = problem.payoff.control_bounds();
    for steps in rate_steps {
        if steps.is_empty() || steps.iter().any(|v| !(v.is_finite() && *v >= lo && *v <= hi)) {
            return Err(Error::InvalidInput("candidate rates must be nonempty and lie in K".into()));
        }
    }
    let dts: Vec<f64> = (0..lattice.num_stages()).map(|k| lattice.dt(k)).collect();
    let tau = float_gcd(&dts).ok_or_else(|| Error::InvalidInput("step lengths are not commensurable".into()))?;
    let step_units = multiples(&dts, tau);
    let mut quantum = Vec::with_capacity(problem.n);
    let mut rate_units = Vec::with_capacity(problem.n);
    for steps in rate_steps {
        let rho = float_gcd(steps).ok_or_else(|| Error::InvalidInput("candidate rates are not commensurable".into()))?;
        quantum.push(rho * tau);
        rate_units.push(multiples(steps, rho));
    }
    let mut dp = Dp {
        problem,
        lattice,
        rate_steps,
        quantum: &quantum,
        rate_units: &rate_units,
        step_units: &step_units,
        table: HashMap::new(),
    };
    let value = dp.value(0, 0, vec![0; problem.n]);
    let table = dp.table;
    Ok(OracleSolution {
        rate_steps: rate_steps.to_vec(),
        quantum,
        value,
        initial_budget: problem.initial_budget.clone(),
        rate_units,
        step_units,
        table,
    })
}

struct Dp<'a> {
    problem: &'a ProblemSpec,
    lattice: &'a LatticeProcess,
    rate_steps: &'a [Vec<f64>],
    quantum: &'a [f64],
    rate_units: &'a [Vec<i64>],
    step_units: &'a [i64],
    table: HashMap<Key, (f64, Vec<usize>)>,
}

impl Dp<'_> {
    fn feasible(&self, units: &[i64]) -> bool {
        let y: Vec<f64> = units
            .iter()
            .zip(self.quantum)
            .zip(&self.problem.initial_budget)
            .map(|((u, q), y0)| y0 + *u as f64 * q)
            .collect();
        y.iter().all(|v| *v >= -tolerance::FEASIBILITY)
            && self.problem.feasible_set.contains_with_slack(&y, tolerance::FEASIBILITY)
    }

    fn value(&mut self, stage: usize, node: usize, units: Vec<i64>) -> f64 {
        if stage == self.lattice.num_stages() {
            return 0.0;
        }
        if let Some((v, _)) = self.table.get(&(stage, node, units.clone())) {
            return *v;
        }
        let n = units.len();
        let dt = self.lattice.dt(stage);
        let x = self.lattice.stages[stage][node].value.clone();
        let children = self.lattice.stages[stage][node].children.clone();
        let mut best = (f64::NEG_INFINITY, vec![0; n]);
        let mut idx = vec![0usize; n];
        loop {
            let next: Vec<i64> = (0..n)
                .map(|i| units[i] + self.rate_units[i][idx[i]] * self.step_units[stage])
                .collect();
            if self.feasible(&next) {
                let v: Vec<f64> = (0..n).map(|i| self.rate_steps[i][idx[i]]).collect();
                let mut total = dt * self.problem.payoff.running(&x, &v);
                for &(c, p) in &children {
                    if p > 0.0 {
                        total += p * self.value(stage + 1, c, next.clone());
                    }
                }
                if total > best.0 {
                    best = (total, idx.clone());
                }
            }
            // Odometer over the candidate grid.
            let mut a = 0;
            while a < n {
                idx[a] += 1;
                if idx[a] < self.rate_steps[a].len() {
                    break;
                }
                idx[a] = 0;
                a += 1;
            }
            if a == n {
                break;
            }
        }
        if best.0 == f64::NEG_INFINITY {
            // Unreachable for down-closed budgets with a zero candidate; keep
            // the table total anyway.
            best.0 = 0.0;
        }
        self.table.insert((stage, node, units), best.clone());
        best.0
    }
}

/// Upper bound on `J - J_oracle` caused by restricting rates to the grid.
///
/// Linear payoff: rounding every optimal rate down to the next candidate
/// keeps the policy feasible and loses at most `dt X_i gap_i` per stage.
/// Quadratic payoff: rounding to the nearest candidate around an interior
/// optimum loses at most `dt lambda_max sum_i (gap_i / 2)^2` per stage.
pub fn oracle_step_bound(problem: &ProblemSpec, lattice: &LatticeProcess, rate_steps: &[Vec<f64>]) -> Result<f64> {
    let gaps: Vec<f64> = rate_steps
        .iter()
        .map(|steps| {
            let mut s = steps.clone();
            s.sort_by(f64::total_cmp);
            let inner = s.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
            match &problem.payoff {
                PayoffSpec::LinearBox { rate_cap } => inner.max(s[0]).max(rate_cap - s[s.len() - 1]),
                PayoffSpec::LinearQuadratic { .. } => inner,
            }
        })
        .collect();
    let mut bound = 0.0;
    for k in 0..lattice.num_stages() {
        let dt = lattice.dt(k);
        bound += match &problem.payoff {
            PayoffSpec::LinearBox { .. } => {
                dt * lattice.stages[k]
                    .iter()
                    .map(|node| node.value.iter().zip(&gaps).map(|(x, g)| x * g).sum::<f64>())
                    .fold(0.0, f64::max)
            }
            PayoffSpec::LinearQuadratic { penalty_matrix } => {
                let lmax = QuadraticHamiltonian::new(penalty_matrix)?.max_eigenvalue();
                dt * lmax * gaps.iter().map(|g| 0.25 * g * g).sum::<f64>()
            }
        };
    }
    Ok(bound)
}

/// Same columns as the solver export; derivative columns are forward
/// differences over one budget unit where that state was reached, else empty.
pub fn write_oracle_csv<W: Write>(solution: &OracleSolution, writer: W) -> Result<()> {
    let n = solution.quantum.len();
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["stage".to_string(), "node_id".to_string()];
    header.extend((1..=n).map(|i| format!("y_{i}")));
    header.push("J".into());
    header.extend((1..=n).map(|i| format!("dJ_{i}")));
    header.extend((1..=n).map(|i| format!("v_{i}")));
    w.write_record(&header)?;
    for e in solution.entries() {
        let mut row = vec![e.stage.to_string(), e.node.to_string()];
        row.extend(e.budget.iter().map(f64::to_string));
        row.push(e.value.to_string());
        for i in 0..n {
            let mut up = e.units.clone();
            up[i] += 1;
            row.push(match solution.lookup(e.stage, e.node, &up) {
                Some((v, _)) => ((v - e.value) / solution.quantum[i]).to_string(),
                None => String::new(),
            });
        }
        row.extend(e.control.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `{0, step, 2 step, ..}` up to `top` inclusive.
pub fn uniform_steps(step: f64, top: f64) -> Vec<f64> {
    let count = (top / step + 1e-9).floor() as usize;
    (0..=count).map(|k| k as f64 * step).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FeasibleSet, LatticeNode};

    fn linear(alpha: f64, horizon: f64) -> ProblemSpec {
        ProblemSpec {
            n: 1,
            horizon,
            feasible_set: FeasibleSet::boxed(&[alpha]),
            payoff: PayoffSpec::LinearBox { rate_cap: 1.0 },
            initial_budget: vec![0.0],
        }
    }

    #[test]
    fn gcd_of_decimal_steps() {
        let g = float_gcd(&[0.0, 0.05, 0.1, 1.95, 2.0]).unwrap();
        assert!((g - 0.05).abs() < 1e-12);
        assert!(float_gcd(&[1.0, std::f64::consts::PI]).is_none());
    }

    #[test]
    fn deterministic_quarter_steps() {
        let problem = linear(1.0, 1.0);
        let lattice = LatticeProcess::constant(&[2.0], 4, 1.0).unwrap();
        let sol = brute_force_dp(&problem, &lattice, &[vec![0.0, 0.25, 0.5, 0.75, 1.0]]).unwrap();
        assert!((sol.value - 2.0).abs() < 1e-12);
        let (controls, payoff) = sol.reconstruct(&lattice, &problem, &[0, 0, 0, 0, 0]).unwrap();
        assert_eq!(controls, vec![vec![1.0]; 4]);
        assert!((payoff - sol.value).abs() < 1e-12);
    }

    #[test]
    fn two_stage_binomial() {
        let node = |x: f64, p: f64, children: Vec<(usize, f64)>| LatticeNode {
            value: vec![x],
            probability: p,
            children,
        };
        let lattice = LatticeProcess::new(
            vec![0.0, 1.0, 2.0],
            vec![
                vec![node(1.0, 1.0, vec![(0, 0.5), (1, 0.5)])],
                vec![node(3.0, 0.5, vec![(0, 1.0)]), node(0.0, 0.5, vec![(1, 1.0)])],
                vec![node(3.0, 0.5, vec![]), node(0.0, 0.5, vec![])],
            ],
        )
        .unwrap();
        let problem = linear(1.0, 2.0);
        let sol = brute_force_dp(&problem, &lattice, &[uniform_steps(0.1, 1.0)]).unwrap();
        assert!((sol.value - 1.5).abs() < 1e-12);
        assert_eq!(sol.lookup(0, 0, &[0]).unwrap().1, vec![0.0]);
        assert_eq!(sol.lookup(1, 0, &[0]).unwrap().1, vec![1.0]);
    }

    #[test]
    fn quadratic_discretization_gap() {
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
        let steps = uniform_steps(0.05, 2.0);
        assert_eq!(steps.len(), 41);
        let sol = brute_force_dp(&problem, &lattice, std::slice::from_ref(&steps)).unwrap();
        assert!((0.9975..=1.0 + 1e-12).contains(&sol.value), "{}", sol.value);
        let bound = oracle_step_bound(&problem, &lattice, &[steps]).unwrap();
        assert!((bound - 0.05f64.powi(2) / 4.0).abs() < 1e-15);
    }

    #[test]
    fn refining_the_rate_grid_never_hurts() {
        let problem = ProblemSpec {
            n: 2,
            horizon: 1.0,
            feasible_set: FeasibleSet::half_space(&[1.0, 1.0]),
            payoff: PayoffSpec::LinearBox { rate_cap: 1.0 },
            initial_budget: vec![0.0, 0.0],
        };
        let lattice = LatticeProcess::binomial(3, 1.0, &[1.0, 1.0], &[1.3, 1.1], &[0.7, 0.9], 0.5).unwrap();
        let coarse = brute_force_dp(&problem, &lattice, &[uniform_steps(0.5, 1.0), uniform_steps(0.5, 1.0)]).unwrap();
        let fine = brute_force_dp(&problem, &lattice, &[uniform_steps(0.25, 1.0), uniform_steps(0.25, 1.0)]).unwrap();
        assert!(fine.value >= coarse.value - 1e-12);
    }

    #[test]
    fn caps_are_enforced() {
        let problem = linear(1.0, 1.0);
        let lattice = LatticeProcess::constant(&[2.0], 9, 1.0).unwrap();
        assert!(matches!(
            brute_force_dp(&problem, &lattice, &[vec![0.0, 1.0]]),
            Err(Error::CapsExceeded(_))
        ));
        let lattice = LatticeProcess::constant(&[2.0], 4, 1.0).unwrap();
        assert!(matches!(
            brute_force_dp(&problem, &lattice, &[uniform_steps(0.02, 1.0)]),
            Err(Error::CapsExceeded(_))
        ));
    }
}
