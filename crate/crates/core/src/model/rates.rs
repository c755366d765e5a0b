use serde::{Deserialize, Serialize};

use super::{FeasibleSet, PayoffSpec};
use crate::error::{check_dim, Error, Result};
use crate::tolerance;

/// Linear description of the admissible one-step rates
/// `{v : lower <= v <= upper, row_j . v <= rhs_j}`.
///
/// `rows[j]` is the budget row `j` of the feasible set rescaled by the step
/// length, so row indices match the feasible set's constraint indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSet {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
    pub rhs: Vec<f64>,
}

/// Rates `v` in `K` such that `y + dt * v` stays in the feasible set.
///
/// Cumulative consumption is floored at zero: when `K` is unbounded below
/// (quadratic payoff) the rates are also limited to `y + dt * v >= 0`. For
/// the box payoff the floor is implied by `v >= 0`.
pub fn feasible_rate_box(set: &FeasibleSet, y: &[f64], dt: f64, payoff: &PayoffSpec) -> Result<RateSet> {
    check_dim(set.n, y.len())?;
    if !(dt > 0.0) {
        return Err(Error::InvalidInput(format!("step length must be positive, got {dt}")));
    }
    if !set.contains_with_slack(y, tolerance::FEASIBILITY) {
        return Err(Error::Infeasible(format!("budget state {y:?}")));
    }
    let (lo, hi) = payoff.control_bounds();
    let rhs = set.slacks(y).into_iter().map(|s| s.max(0.0) / dt).collect();
    Ok(RateSet {
        lower: y.iter().map(|y| lo.max((-y / dt).min(0.0))).collect(),
        upper: vec![hi; set.n],
        rows: set.constraint_matrix.clone(),
        rhs,
    })
}

impl RateSet {
    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Intersects with the state box `state_lo <= y + dt v <= state_hi`.
    pub fn clamp_state(&mut self, y: &[f64], dt: f64, state_lo: &[f64], state_hi: &[f64]) {
        for i in 0..self.dim() {
            let lo = ((state_lo[i] - y[i]) / dt).min(0.0);
            let hi = ((state_hi[i] - y[i]) / dt).max(0.0);
            self.lower[i] = self.lower[i].max(lo);
            self.upper[i] = self.upper[i].min(hi);
        }
    }

    pub fn row_value(&self, j: usize, v: &[f64]) -> f64 {
        self.rows[j].iter().zip(v).map(|(a, v)| a * v).sum()
    }

    pub fn contains(&self, v: &[f64], slack: f64) -> bool {
        v.iter()
            .enumerate()
            .all(|(i, x)| *x >= self.lower[i] - slack && *x <= self.upper[i] + slack)
            && (0..self.rows.len()).all(|j| self.row_value(j, v) <= self.rhs[j] + slack)
    }

    /// Rows binding at `v` (within the feasibility slack).
    pub fn active_rows(&self, v: &[f64]) -> Vec<usize> {
        (0..self.rows.len())
            .filter(|&j| self.row_value(j, v) >= self.rhs[j] - tolerance::FEASIBILITY)
            .collect()
    }

    /// Upper bound of coordinate `i` when every other coordinate is zero.
    pub fn coordinate_cap(&self, i: usize) -> f64 {
        self.rows
            .iter()
            .zip(&self.rhs)
            .filter(|(row, _)| row[i] > 0.0)
            .map(|(row, r)| r / row[i])
            .fold(self.upper[i], f64::min)
    }

    /// Parameter interval `[lo, hi]` of `v + s d` inside the set, assuming `v`
    /// is feasible.
    pub fn line_interval(&self, v: &[f64], d: &[f64]) -> (f64, f64) {
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for i in 0..self.dim() {
            if d[i] > 0.0 {
                hi = hi.min((self.upper[i] - v[i]) / d[i]);
                lo = lo.max((self.lower[i] - v[i]) / d[i]);
            } else if d[i] < 0.0 {
                hi = hi.min((self.lower[i] - v[i]) / d[i]);
                lo = lo.max((self.upper[i] - v[i]) / d[i]);
            }
        }
        for j in 0..self.rows.len() {
            let slope = self.row_value(j, d);
            let room = self.rhs[j] - self.row_value(j, v);
            if slope > 0.0 {
                hi = hi.min(room / slope);
            } else if slope < 0.0 {
                lo = lo.max(room / slope);
            }
        }
        (lo.min(0.0), hi.max(0.0))
    }

    /// Euclidean projection by Dykstra's alternating projections, finished by
    /// a radial pull toward the origin (always feasible) to remove residual
    /// violations.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        if self.contains(v, 0.0) {
            return v.to_vec();
        }
        let n = self.dim();
        let sets = self.rows.len() + 1;
        let mut x = v.to_vec();
        let mut increments = vec![vec![0.0; n]; sets];
        for _ in 0..2000 {
            let before = x.clone();
            for (s, inc) in increments.iter_mut().enumerate() {
                let z: Vec<f64> = x.iter().zip(inc.iter()).map(|(a, b)| a + b).collect();
                let p = if s == 0 {
                    z.iter()
                        .enumerate()
                        .map(|(i, z)| z.clamp(self.lower[i], self.upper[i]))
                        .collect::<Vec<_>>()
                } else {
                    let row = &self.rows[s - 1];
                    let excess = self.row_value(s - 1, &z) - self.rhs[s - 1];
                    let norm2: f64 = row.iter().map(|a| a * a).sum();
                    if excess > 0.0 && norm2 > 0.0 {
                        z.iter().zip(row).map(|(z, a)| z - excess * a / norm2).collect()
                    } else {
                        z.clone()
                    }
                };
                for i in 0..n {
                    inc[i] = z[i] - p[i];
                }
                x = p;
            }
            let moved: f64 = x.iter().zip(&before).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if moved < 1e-15 {
                break;
            }
        }
        self.pull_inside(&x)
    }

    fn pull_inside(&self, v: &[f64]) -> Vec<f64> {
        let mut t: f64 = 1.0;
        for (i, x) in v.iter().enumerate() {
            if *x > self.upper[i] && *x > 0.0 {
                t = t.min(self.upper[i].max(0.0) / x);
            }
            if *x < self.lower[i] && *x < 0.0 {
                t = t.min(self.lower[i].min(0.0) / x);
            }
        }
        for j in 0..self.rows.len() {
            let r = self.row_value(j, v);
            if r > self.rhs[j] && r > 0.0 {
                t = t.min(self.rhs[j].max(0.0) / r);
            }
        }
        v.iter().map(|x| x * t.max(0.0)).collect()
    }
}
