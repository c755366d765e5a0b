use minilp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::hamiltonian::QuadraticHamiltonian;
use crate::model::{to_matrix, PayoffSpec, ProblemSpec};
use crate::tolerance;

/// Anticipative optimum on one path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathwiseResult {
    pub value: f64,
    /// Rate per stage `0..N`.
    pub controls: Vec<Vec<f64>>,
}

/// Active-set enumeration is used up to this many budget rows.
const MAX_ACTIVE_SET_ROWS: usize = 12;
const DUAL_PG_ITERATIONS: usize = 20_000;

/// Maximizes `sum_j dt_j [f(X_j, u_j) + mu_j^T u_j]` over deterministic rates
/// with `y0 + sum_j dt_j u_j` in the feasible set.
///
/// `path` and `penalty` carry one entry per grid point; the last is unused.
pub fn pathwise_maximize(
    path: &[Vec<f64>],
    penalty: &[Vec<f64>],
    time_grid: &[f64],
    problem: &ProblemSpec,
) -> Result<PathwiseResult> {
    let scores = scores(path, penalty, time_grid, problem.n)?;
    match &problem.payoff {
        PayoffSpec::LinearBox { rate_cap } if problem.feasible_set.is_box() => {
            Ok(pathwise_greedy(&scores, time_grid, problem, *rate_cap))
        }
        PayoffSpec::LinearBox { rate_cap } => pathwise_lp(&scores, time_grid, problem, *rate_cap),
        PayoffSpec::LinearQuadratic { penalty_matrix } => pathwise_qp(&scores, time_grid, problem, penalty_matrix),
    }
}

fn scores(path: &[Vec<f64>], penalty: &[Vec<f64>], time_grid: &[f64], n: usize) -> Result<Vec<Vec<f64>>> {
    let stages = time_grid.len().saturating_sub(1);
    if path.len() != stages + 1 || penalty.len() != stages + 1 {
        return Err(Error::InvalidInput(format!(
            "path ({}) and penalty ({}) must have {} points",
            path.len(),
            penalty.len(),
            stages + 1
        )));
    }
    (0..stages)
        .map(|j| {
            check_dim(n, path[j].len())?;
            check_dim(n, penalty[j].len())?;
            Ok(path[j].iter().zip(&penalty[j]).map(|(x, m)| x + m).collect())
        })
        .collect()
}

fn dts(time_grid: &[f64]) -> Vec<f64> {
    time_grid.windows(2).map(|w| w[1] - w[0]).collect()
}

/// Box budget, linear payoff: each coordinate's budget goes to its stages in
/// decreasing order of positive score.
pub fn pathwise_greedy(scores: &[Vec<f64>], time_grid: &[f64], problem: &ProblemSpec, rate_cap: f64) -> PathwiseResult {
    let dt = dts(time_grid);
    let stages = scores.len();
    let mut controls = vec![vec![0.0; problem.n]; stages];
    let mut value = 0.0;
    for i in 0..problem.n {
        let mut remaining = (problem.feasible_set.coordinate_max(i) - problem.initial_budget[i]).max(0.0);
        let mut order: Vec<usize> = (0..stages).filter(|&j| scores[j][i] > 0.0).collect();
        order.sort_by(|&a, &b| scores[b][i].total_cmp(&scores[a][i]).then(a.cmp(&b)));
        for j in order {
            if remaining <= 0.0 {
                break;
            }
            let u = rate_cap.min(remaining / dt[j]);
            remaining -= dt[j] * u;
            controls[j][i] = u;
            value += dt[j] * u * scores[j][i];
        }
    }
    PathwiseResult { value, controls }
}

/// General polyhedral budget, linear payoff, by the simplex method.
pub fn pathwise_lp(scores: &[Vec<f64>], time_grid: &[f64], problem: &ProblemSpec, rate_cap: f64) -> Result<PathwiseResult> {
    let dt = dts(time_grid);
    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let vars: Vec<Vec<_>> = scores
        .iter()
        .zip(&dt)
        .map(|(s, dt)| s.iter().map(|s| lp.add_var(dt * s, (0.0, rate_cap))).collect())
        .collect();
    let set = &problem.feasible_set;
    for (r, slack) in set.slacks(&problem.initial_budget).into_iter().enumerate() {
        let row = &set.constraint_matrix[r];
        let terms: Vec<_> = vars
            .iter()
            .zip(&dt)
            .flat_map(|(vs, dt)| vs.iter().zip(row).map(move |(v, a)| (*v, a * dt)))
            .filter(|(_, c)| *c != 0.0)
            .collect();
        lp.add_constraint(terms, ComparisonOp::Le, slack.max(0.0));
    }
    let sol = lp
        .solve()
        .map_err(|e| Error::Infeasible(format!("pathwise linear program: {e}")))?;
    let controls = vars
        .iter()
        .map(|vs| vs.iter().map(|v| sol.var_value(*v).clamp(0.0, rate_cap)).collect())
        .collect::<Vec<Vec<f64>>>();
    let value = controls
        .iter()
        .zip(scores)
        .zip(&dt)
        .map(|((u, s), dt)| dt * u.iter().zip(s).map(|(u, s)| u * s).sum::<f64>())
        .sum();
    Ok(PathwiseResult { value, controls })
}

/// Quadratic payoff with `K = R^n`: the stationarity conditions give
/// `u_j = G^{-1} (s_j - A^T lambda) / 2`, so only the total consumption is
/// constrained. The multipliers are found by active-set enumeration, or by
/// projected gradient on the dual when there are too many rows. The value
/// returned is the Lagrangian dual function, an upper bound that is exact at
/// the optimal multipliers.
pub fn pathwise_qp(
    scores: &[Vec<f64>],
    time_grid: &[f64],
    problem: &ProblemSpec,
    penalty_matrix: &[Vec<f64>],
) -> Result<PathwiseResult> {
    let dt = dts(time_grid);
    let n = problem.n;
    let q = QuadraticHamiltonian::new(penalty_matrix)?;
    let g_inv = q.matrix().try_inverse().ok_or(Error::NotPositiveDefinite)?;
    let a = to_matrix(&problem.feasible_set.constraint_matrix);
    let room = DVector::from_vec(problem.feasible_set.slacks(&problem.initial_budget));
    let total_time: f64 = dt.iter().sum();
    let weighted = scores
        .iter()
        .zip(&dt)
        .fold(DVector::zeros(n), |acc, (s, dt)| acc + DVector::from_column_slice(s) * *dt);

    // Total consumption c(lambda) = G^{-1} (S - T A^T lambda) / 2.
    let consumption = |lambda: &DVector<f64>| -> DVector<f64> {
        &g_inv * (&weighted - a.transpose() * lambda * total_time) * 0.5
    };
    let lambda = if a.nrows() <= MAX_ACTIVE_SET_ROWS {
        active_set(&a, &room, &g_inv, &weighted, total_time, &consumption)
    } else {
        None
    }
    .unwrap_or_else(|| dual_projected_gradient(&a, &room, &g_inv, total_time, &consumption));

    let shift = a.transpose() * &lambda;
    let mut value = lambda.dot(&room);
    let controls = scores
        .iter()
        .zip(&dt)
        .map(|(s, dt)| {
            let z = DVector::from_column_slice(s) - &shift;
            let u = &g_inv * &z * 0.5;
            value += dt * 0.5 * z.dot(&u);
            u.as_slice().to_vec()
        })
        .collect();
    Ok(PathwiseResult { value, controls })
}

fn active_set<F>(
    a: &DMatrix<f64>,
    room: &DVector<f64>,
    g_inv: &DMatrix<f64>,
    weighted: &DVector<f64>,
    total_time: f64,
    consumption: &F,
) -> Option<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let m = a.nrows();
    let mut subsets: Vec<usize> = (0..1usize << m).collect();
    subsets.sort_by_key(|s| (s.count_ones(), *s));
    for mask in subsets {
        let rows: Vec<usize> = (0..m).filter(|r| (mask >> r) & 1 == 1).collect();
        let mut lambda = DVector::zeros(m);
        if !rows.is_empty() {
            let sub = a.select_rows(&rows);
            let lhs = &sub * g_inv * sub.transpose() * (0.5 * total_time);
            let rhs = &sub * g_inv * weighted * 0.5 - room.select_rows(&rows);
            let Some(sol) = lhs.lu().solve(&rhs) else { continue };
            if sol.iter().any(|l| *l < -tolerance::LINALG) {
                continue;
            }
            for (k, r) in rows.iter().enumerate() {
                lambda[*r] = sol[k].max(0.0);
            }
        }
        let used = a * consumption(&lambda);
        if (0..m).all(|r| used[r] <= room[r] + tolerance::FEASIBILITY) {
            return Some(lambda);
        }
    }
    None
}

fn dual_projected_gradient<F>(
    a: &DMatrix<f64>,
    room: &DVector<f64>,
    g_inv: &DMatrix<f64>,
    total_time: f64,
    consumption: &F,
) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let curvature = a * g_inv * a.transpose() * (0.5 * total_time);
    let lipschitz = curvature.symmetric_eigenvalues().max().max(tolerance::LINALG);
    let mut lambda = DVector::zeros(a.nrows());
    for _ in 0..DUAL_PG_ITERATIONS {
        let grad = room - a * consumption(&lambda);
        let next = (&lambda - grad / lipschitz).map(|l| l.max(0.0));
        let moved = (&next - &lambda).amax();
        lambda = next;
        if moved < 1e-14 {
            break;
        }
    }
    lambda
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FeasibleSet;

    fn scalar(budget: f64) -> ProblemSpec {
        ProblemSpec {
            n: 1,
            horizon: 2.0,
            feasible_set: FeasibleSet::boxed(&[budget]),
            payoff: PayoffSpec::LinearBox { rate_cap: 1.0 },
            initial_budget: vec![0.0],
        }
    }

    #[test]
    fn deterministic_zero_penalty() {
        let mut p = scalar(1.0);
        p.horizon = 1.0;
        let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
        let r = pathwise_maximize(&vec![vec![2.0]; 5], &vec![vec![0.0]; 5], &grid, &p).unwrap();
        assert_eq!(r.value, 2.0);
        assert!(r.controls.iter().all(|u| u[0] == 1.0));
    }

    #[test]
    fn greedy_picks_best_stage() {
        let p = scalar(1.0);
        let grid = [0.0, 1.0, 2.0];
        let path = vec![vec![1.0], vec![3.0], vec![0.0]];
        let r = pathwise_maximize(&path, &vec![vec![0.0]; 3], &grid, &p).unwrap();
        assert_eq!(r.value, 3.0);
        let mu = vec![vec![2.0], vec![-2.5], vec![0.0]];
        let r = pathwise_maximize(&path, &mu, &grid, &p).unwrap();
        assert_eq!((r.value, r.controls.clone()), (3.0, vec![vec![1.0], vec![0.0]]));
        // Enumeration over u in {0, 0.1, .., 1}^2 with u_0 + u_1 <= 1.
        let mut best = f64::NEG_INFINITY;
        for a in 0..=10 {
            for b in 0..=(10 - a) {
                best = best.max(3.0 * a as f64 / 10.0 + 0.5 * b as f64 / 10.0);
            }
        }
        assert!((best - 3.0).abs() < 1e-12);
        let lp = pathwise_lp(&[vec![3.0], vec![0.5]], &grid, &p, 1.0).unwrap();
        assert!((lp.value - 3.0).abs() < 1e-8);
    }

    #[test]
    fn lp_handles_shared_budget() {
        let p = ProblemSpec {
            n: 2,
            horizon: 1.0,
            feasible_set: FeasibleSet::half_space(&[1.0, 2.0]),
            payoff: PayoffSpec::LinearBox { rate_cap: 1.0 },
            initial_budget: vec![0.0, 0.0],
        };
        // Two stages of length 0.5; coordinate 2 costs twice as much budget.
        let grid = [0.0, 0.5, 1.0];
        let path = vec![vec![1.0, 3.0], vec![2.0, 1.0], vec![0.0, 0.0]];
        let r = pathwise_maximize(&path, &vec![vec![0.0; 2]; 3], &grid, &p).unwrap();
        // Value per budget unit: 1, 1.5, 2, 0.5. Stage 1 coordinate 1 at full
        // rate uses half the budget (value 1); the rest buys rate 0.5 of stage
        // 0 coordinate 2 (value 0.75).
        assert!((r.value - 1.75).abs() < 1e-8, "{r:?}");
    }

    #[test]
    fn quadratic_unconstrained_matches_closed_form() {
        let p = ProblemSpec {
            n: 1,
            horizon: 1.0,
            feasible_set: FeasibleSet::boxed(&[10.0]),
            payoff: PayoffSpec::LinearQuadratic {
                penalty_matrix: vec![vec![1.0]],
            },
            initial_budget: vec![0.0],
        };
        let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
        let r = pathwise_maximize(&vec![vec![2.0]; 5], &vec![vec![0.0]; 5], &grid, &p).unwrap();
        assert!((r.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quadratic_binding_budget() {
        // max sum dt (2u - u^2) with sum dt u <= 0.5 over T = 1: u = 0.5,
        // value 0.75.
        let p = ProblemSpec {
            n: 1,
            horizon: 1.0,
            feasible_set: FeasibleSet::boxed(&[0.5]),
            payoff: PayoffSpec::LinearQuadratic {
                penalty_matrix: vec![vec![1.0]],
            },
            initial_budget: vec![0.0],
        };
        let grid = [0.0, 0.5, 1.0];
        let r = pathwise_maximize(&vec![vec![2.0]; 3], &vec![vec![0.0]; 3], &grid, &p).unwrap();
        assert!((r.value - 0.75).abs() < 1e-12, "{r:?}");
        assert!((r.controls[0][0] - 0.5).abs() < 1e-12);
        let a = to_matrix(&p.feasible_set.constraint_matrix);
        let room = DVector::from_vec(vec![0.5]);
        let g_inv = DMatrix::from_element(1, 1, 1.0);
        let weighted = DVector::from_element(1, 2.0);
        let c = |l: &DVector<f64>| (&weighted - a.transpose() * l) * 0.5;
        let lambda = dual_projected_gradient(&a, &room, &g_inv, 1.0, &c);
        assert!((lambda[0] - 1.0).abs() < 1e-9);
    }
}
