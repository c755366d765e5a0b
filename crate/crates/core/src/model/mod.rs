//! Static data of the control problem: budget set, payoff family, problem
//! specification and the two process carriers (scenario lattice and path
//! ensemble).

mod lattice;
mod paths;
mod rates;

pub use lattice::{LatticeNode, LatticeProcess, MAX_ENUMERATED_PATHS};
pub use paths::{average_process, PathEnsemble, PathShape};
pub use rates::{feasible_rate_box, RateSet};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result};
use crate::tolerance;

/// Polyhedral budget region `{y : A y <= b}` with `A >= 0` and `b > 0`.
///
/// `y` is cumulative consumption; the region is down-closed, so consuming
/// less never leaves it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibleSet {
    pub n: usize,
    /// `m x n`, one row per constraint.
    pub constraint_matrix: Vec<Vec<f64>>,
    pub constraint_bounds: Vec<f64>,
}

impl FeasibleSet {
    pub fn new(constraint_matrix: Vec<Vec<f64>>, constraint_bounds: Vec<f64>) -> Self {
        let n = constraint_matrix.first().map_or(0, Vec::len);
        Self {
            n,
            constraint_matrix,
            constraint_bounds,
        }
    }

    /// `{y : y_i <= alpha_i}`.
    pub fn boxed(alphas: &[f64]) -> Self {
        let n = alphas.len();
        let rows = (0..n)
            .map(|i| {
                let mut row = vec![0.0; n];
                row[i] = 1.0;
                row
            })
            .collect();
        Self::new(rows, alphas.to_vec())
    }

    /// `{y : a^T y <= 1}`.
    pub fn half_space(a: &[f64]) -> Self {
        Self::new(vec![a.to_vec()], vec![1.0])
    }

    pub fn rows(&self) -> usize {
        self.constraint_matrix.len()
    }

    pub fn row_dot(&self, j: usize, y: &[f64]) -> f64 {
        self.constraint_matrix[j]
            .iter()
            .zip(y)
            .map(|(a, y)| a * y)
            .sum()
    }

    /// Remaining slack `b_j - a_j^T y` of every row.
    pub fn slacks(&self, y: &[f64]) -> Vec<f64> {
        (0..self.rows())
            .map(|j| self.constraint_bounds[j] - self.row_dot(j, y))
            .collect()
    }

    pub fn membership(&self, y: &[f64]) -> Result<bool> {
        check_dim(self.n, y.len())?;
        Ok(self.contains_with_slack(y, tolerance::LINALG))
    }

    pub(crate) fn contains_with_slack(&self, y: &[f64], slack: f64) -> bool {
        (0..self.rows()).all(|j| self.row_dot(j, y) <= self.constraint_bounds[j] + slack)
    }

    /// True when every row constrains exactly one coordinate.
    pub fn is_box(&self) -> bool {
        self.constraint_matrix
            .iter()
            .all(|row| row.iter().filter(|a| **a > 0.0).count() == 1)
    }

    /// Largest value coordinate `i` can take inside the set when all other
    /// coordinates are zero.
    pub fn coordinate_max(&self, i: usize) -> f64 {
        (0..self.rows())
            .filter(|&j| self.constraint_matrix[j][i] > 0.0)
            .map(|j| self.constraint_bounds[j] / self.constraint_matrix[j][i])
            .fold(f64::INFINITY, f64::min)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.n == 0 {
            out.push("feasible set has dimension zero".to_string());
        }
        if self.constraint_matrix.is_empty() {
            out.push("feasible set has no constraint rows".to_string());
        }
        if self.constraint_bounds.len() != self.rows() {
            out.push(format!(
                "constraint bounds have length {} but there are {} rows",
                self.constraint_bounds.len(),
                self.rows()
            ));
        }
        for (j, row) in self.constraint_matrix.iter().enumerate() {
            if row.len() != self.n {
                out.push(format!("constraint row {j} has length {} (expected {})", row.len(), self.n));
                continue;
            }
            if row.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
                out.push(format!("constraint row {j} has a negative or non-finite entry"));
            }
            if !row.iter().any(|a| *a > 0.0) {
                out.push(format!("constraint row {j} has no positive entry"));
            }
        }
        for (j, b) in self.constraint_bounds.iter().enumerate() {
            if !(b.is_finite() && *b > 0.0) {
                out.push(format!("constraint bound {j} is not a positive finite number"));
            }
        }
        for i in 0..self.n {
            let bounded = self
                .constraint_matrix
                .iter()
                .any(|row| row.get(i).is_some_and(|a| *a > 0.0));
            if !bounded {
                out.push(format!("coordinate {i} is not bounded by any constraint row"));
            }
        }
        out
    }
}

/// Running payoff `f(x, v)` together with its control set `K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PayoffSpec {
    /// `f = v^T x`, `K = [0, L]^n`.
    LinearBox { rate_cap: f64 },
    /// `f = v^T x - v^T G v`, `K = R^n`.
    LinearQuadratic { penalty_matrix: Vec<Vec<f64>> },
}

impl PayoffSpec {
    pub fn running(&self, x: &[f64], v: &[f64]) -> f64 {
        let linear: f64 = x.iter().zip(v).map(|(x, v)| x * v).sum();
        match self {
            PayoffSpec::LinearBox { .. } => linear,
            PayoffSpec::LinearQuadratic { penalty_matrix } => {
                linear - quadratic_form(penalty_matrix, v)
            }
        }
    }

    /// Coordinate bounds of the control set `K`.
    pub fn control_bounds(&self) -> (f64, f64) {
        match self {
            PayoffSpec::LinearBox { rate_cap } => (0.0, *rate_cap),
            PayoffSpec::LinearQuadratic { .. } => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    pub fn dimension(&self) -> Option<usize> {
        match self {
            PayoffSpec::LinearBox { .. } => None,
            PayoffSpec::LinearQuadratic { penalty_matrix } => Some(penalty_matrix.len()),
        }
    }

    pub fn violations(&self) -> Vec<String> {
        match self {
            PayoffSpec::LinearBox { rate_cap } => {
                if rate_cap.is_finite() && *rate_cap > 0.0 {
                    vec![]
                } else {
                    vec!["rate cap must be positive and finite".to_string()]
                }
            }
            PayoffSpec::LinearQuadratic { penalty_matrix } => {
                let n = penalty_matrix.len();
                if n == 0 || penalty_matrix.iter().any(|r| r.len() != n) {
                    return vec!["penalty matrix is not square".to_string()];
                }
                if penalty_matrix.iter().flatten().any(|g| !g.is_finite()) {
                    return vec!["penalty matrix has non-finite entries".to_string()];
                }
                let mut out = Vec::new();
                let symmetric = (0..n).all(|i| {
                    (0..n).all(|j| (penalty_matrix[i][j] - penalty_matrix[j][i]).abs() <= tolerance::LINALG)
                });
                if !symmetric {
                    out.push("penalty matrix not symmetric".to_string());
                }
                let g = to_matrix(penalty_matrix);
                let sym = (&g + g.transpose()) * 0.5;
                let min_eig = SymmetricEigen::new(sym).eigenvalues.min();
                if !(min_eig > 0.0) {
                    out.push("penalty matrix not positive definite".to_string());
                }
                out
            }
        }
    }
}

pub(crate) fn quadratic_form(g: &[Vec<f64>], v: &[f64]) -> f64 {
    g.iter()
        .zip(v)
        .map(|(row, vi)| vi * row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

pub(crate) fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(n, m, |i, j| rows[i][j])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub n: usize,
    pub horizon: f64,
    pub feasible_set: FeasibleSet,
    pub payoff: PayoffSpec,
    pub initial_budget: Vec<f64>,
}

/// Lists every invariant violation of `spec`; an empty list means valid.
pub fn validate_problem(spec: &ProblemSpec) -> Vec<String> {
    let mut out = Vec::new();
    if !(spec.horizon.is_finite() && spec.horizon > 0.0) {
        out.push("horizon must be positive and finite".to_string());
    }
    if spec.feasible_set.n != spec.n {
        out.push(format!(
            "feasible set dimension {} does not match problem dimension {}",
            spec.feasible_set.n, spec.n
        ));
    }
    if let Some(d) = spec.payoff.dimension() {
        if d != spec.n {
            out.push(format!("penalty matrix dimension {d} does not match problem dimension {}", spec.n));
        }
    }
    out.extend(spec.feasible_set.violations());
    out.extend(spec.payoff.violations());
    if spec.initial_budget.len() != spec.n {
        out.push(format!(
            "initial budget has length {} (expected {})",
            spec.initial_budget.len(),
            spec.n
        ));
    } else if spec.feasible_set.violations().is_empty() {
        if spec.initial_budget.iter().any(|y| *y < 0.0) {
            out.push("initial budget has a negative coordinate".to_string());
        }
        if !spec.feasible_set.contains_with_slack(&spec.initial_budget, tolerance::LINALG) {
            out.push("initial budget outside feasible set".to_string());
        }
    }
    out
}

pub(crate) fn ensure_valid(spec: &ProblemSpec) -> Result<()> {
    let v = validate_problem(spec);
    if v.is_empty() {
        Ok(())
    } else {
        Err(crate::Error::InvalidInput(v.join("; ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_problem(y0: f64) -> ProblemSpec {
        ProblemSpec {
            n: 1,
            horizon: 1.0,
            feasible_set: FeasibleSet::boxed(&[1.0]),
            payoff: PayoffSpec::LinearBox { rate_cap: 1.0 },
            initial_budget: vec![y0],
        }
    }

    #[test]
    fn valid_scalar_problem() {
        assert!(validate_problem(&scalar_problem(0.0)).is_empty());
    }

    #[test]
    fn budget_outside_set_is_reported() {
        let v = validate_problem(&scalar_problem(2.0));
        assert_eq!(v, vec!["initial budget outside feasible set".to_string()]);
    }

    #[test]
    fn indefinite_penalty_is_reported() {
        let spec = ProblemSpec {
            n: 2,
            horizon: 1.0,
            feasible_set: FeasibleSet::boxed(&[1.0, 1.0]),
            payoff: PayoffSpec::LinearQuadratic {
                penalty_matrix: vec![vec![1.0, 2.0], vec![2.0, 1.0]],
            },
            initial_budget: vec![0.0, 0.0],
        };
        assert_eq!(
            validate_problem(&spec),
            vec!["penalty matrix not positive definite".to_string()]
        );
    }

    #[test]
    fn unbounded_coordinate_is_reported() {
        let set = FeasibleSet::new(vec![vec![1.0, 0.0]], vec![1.0]);
        assert!(set.violations().iter().any(|v| v.contains("coordinate 1")));
        let neg = FeasibleSet::new(vec![vec![1.0, -1.0], vec![0.0, 1.0]], vec![1.0, 1.0]);
        assert!(neg.violations().iter().any(|v| v.contains("negative")));
    }

    #[test]
    fn membership_examples() {
        let boxed = FeasibleSet::boxed(&[1.0, 1.0]);
        assert!(boxed.membership(&[0.5, 0.9]).unwrap());
        let half = FeasibleSet::half_space(&[1.0, 1.0]);
        assert!(!half.membership(&[0.6, 0.6]).unwrap());
        let line = FeasibleSet::boxed(&[1.0]);
        assert!(line.membership(&[1.0]).unwrap());
        assert!(line.membership(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn coordinate_max_uses_tightest_row() {
        let set = FeasibleSet::new(vec![vec![1.0, 0.0], vec![2.0, 1.0]], vec![1.0, 1.0]);
        assert_eq!(set.coordinate_max(0), 0.5);
        assert_eq!(set.coordinate_max(1), 1.0);
        assert!(!set.is_box());
        assert!(FeasibleSet::boxed(&[1.0, 2.0]).is_box());
    }
}
