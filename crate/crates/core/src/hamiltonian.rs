//! Pointwise Hamiltonians `H(x, p) = sup_{v in K} (f(x, v) + v^T p)` and the
//! constrained one-step maximizer used by the backward recursion.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::{feasible_rate_box, to_matrix, FeasibleSet, PayoffSpec, RateSet};
use crate::tolerance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianResult {
    pub value: f64,
    pub maximizer: Vec<f64>,
    /// Budget rows binding at the maximizer (empty for the pointwise forms).
    pub active_constraints: Vec<usize>,
}

/// `L * sum_i (x_i + p_i)_+`, bang-bang maximizer with ties broken to zero.
pub fn hamiltonian_linear(x: &[f64], p: &[f64], rate_cap: f64) -> HamiltonianResult {
    let mut value = 0.0;
    let maximizer = x
        .iter()
        .zip(p)
        .map(|(x, p)| {
            let score = x + p;
            if score > 0.0 {
                value += rate_cap * score;
                rate_cap
            } else {
                0.0
            }
        })
        .collect();
    HamiltonianResult {
        value,
        maximizer,
        active_constraints: vec![],
    }
}

/// `1/4 (x+p)^T G^{-1} (x+p)` with maximizer `1/2 G^{-1} (x+p)`.
pub fn hamiltonian_quadratic(x: &[f64], p: &[f64], penalty: &[Vec<f64>]) -> Result<HamiltonianResult> {
    Ok(QuadraticHamiltonian::new(penalty)?.eval(x, p))
}

/// Factorized `G` for repeated quadratic Hamiltonian evaluations.
#[derive(Debug, Clone)]
pub struct QuadraticHamiltonian {
    chol: Cholesky<f64, Dyn>,
    max_eigen: f64,
}

impl QuadraticHamiltonian {
    pub fn new(penalty: &[Vec<f64>]) -> Result<Self> {
        let n = penalty.len();
        if n == 0 || penalty.iter().any(|r| r.len() != n) {
            return Err(Error::NotPositiveDefinite);
        }
        let g = to_matrix(penalty);
        if (&g - g.transpose()).amax() > tolerance::LINALG {
            return Err(Error::NotPositiveDefinite);
        }
        let eig = g.clone().symmetric_eigenvalues();
        if !(eig.min() > 0.0) {
            return Err(Error::NotPositiveDefinite);
        }
        let chol = Cholesky::new(g).ok_or(Error::NotPositiveDefinite)?;
        Ok(Self {
            chol,
            max_eigen: eig.max(),
        })
    }

    pub fn solve(&self, z: &[f64]) -> Vec<f64> {
        self.chol.solve(&DVector::from_column_slice(z)).as_slice().to_vec()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.max_eigen
    }

    pub fn eval(&self, x: &[f64], p: &[f64]) -> HamiltonianResult {
        let z: Vec<f64> = x.iter().zip(p).map(|(a, b)| a + b).collect();
        let w = self.solve(&z);
        let value = 0.25 * z.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        HamiltonianResult {
            value,
            maximizer: w.iter().map(|w| 0.5 * w).collect(),
            active_constraints: vec![],
        }
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        let l = self.chol.l();
        &l * l.transpose()
    }
}

/// Payoff-appropriate Hamiltonian, prepared once per problem.
#[derive(Debug, Clone)]
pub enum Hamiltonian {
    Linear { rate_cap: f64 },
    Quadratic(QuadraticHamiltonian),
}

impl Hamiltonian {
    pub fn new(payoff: &PayoffSpec) -> Result<Self> {
        match payoff {
            PayoffSpec::LinearBox { rate_cap } => Ok(Hamiltonian::Linear { rate_cap: *rate_cap }),
            PayoffSpec::LinearQuadratic { penalty_matrix } => {
                Ok(Hamiltonian::Quadratic(QuadraticHamiltonian::new(penalty_matrix)?))
            }
        }
    }

    pub fn eval(&self, x: &[f64], p: &[f64]) -> HamiltonianResult {
        match self {
            Hamiltonian::Linear { rate_cap } => hamiltonian_linear(x, p, *rate_cap),
            Hamiltonian::Quadratic(q) => q.eval(x, p),
        }
    }
}

/// Value of the future as a function of the post-step budget state.
pub trait Continuation {
    fn value(&self, y: &[f64]) -> f64;

    /// Parameters `s` in `(lo, hi)` where `y + s * d` may cross a kink;
    /// `None` when unknown.
    fn kinks(&self, _y: &[f64], _d: &[f64], _lo: f64, _hi: f64) -> Option<Vec<f64>> {
        None
    }

    /// Forward finite-difference step along `axis`.
    fn fd_step(&self, _axis: usize) -> f64 {
        1e-6
    }
}

impl<F: Fn(&[f64]) -> f64> Continuation for F {
    fn value(&self, y: &[f64]) -> f64 {
        self(y)
    }
}

/// Maximizes `dt * f(x, v) + continuation(y + dt v)` over
/// `{v in K : y + dt v in set}`.
pub fn one_step_maximize<C: Continuation + ?Sized>(
    x: &[f64],
    dt: f64,
    y: &[f64],
    set: &FeasibleSet,
    payoff: &PayoffSpec,
    continuation: &C,
) -> Result<HamiltonianResult> {
    check_dim(set.n, x.len())?;
    let rates = feasible_rate_box(set, y, dt, payoff)?;
    let ham = Hamiltonian::new(payoff)?;
    Ok(OneStep {
        x,
        dt,
        y,
        payoff,
        hamiltonian: &ham,
        rates: &rates,
        continuation,
    }
    .solve())
}

pub(crate) struct OneStep<'a, C: Continuation + ?Sized> {
    pub x: &'a [f64],
    pub dt: f64,
    pub y: &'a [f64],
    pub payoff: &'a PayoffSpec,
    pub hamiltonian: &'a Hamiltonian,
    pub rates: &'a RateSet,
    pub continuation: &'a C,
}

const MAX_SWEEPS: usize = 60;
const PG_ITERATIONS: usize = 200;
const UNIFORM_SEGMENTS: usize = 32;

impl<C: Continuation + ?Sized> OneStep<'_, C> {
    fn n(&self) -> usize {
        self.x.len()
    }

    fn target(&self, v: &[f64]) -> Vec<f64> {
        self.y.iter().zip(v).map(|(y, v)| y + self.dt * v).collect()
    }

    pub fn objective(&self, v: &[f64]) -> f64 {
        self.dt * self.payoff.running(self.x, v) + self.continuation.value(&self.target(v))
    }

    pub fn solve(&self) -> HamiltonianResult {
        let n = self.n();
        let zero = vec![0.0; n];
        let mut best = self.ascend(zero.clone());
        if n > 1 {
            let grad = self.continuation_gradient(self.y);
            let guess = self.rates.project(&self.hamiltonian.eval(self.x, &grad).maximizer);
            let alt = self.ascend(guess);
            if alt.1 > best.1 {
                best = alt;
            }
            best = self.gradient_polish(best);
        }
        let (maximizer, value) = best;
        HamiltonianResult {
            value,
            active_constraints: self.rates.active_rows(&maximizer),
            maximizer,
        }
    }

    fn improves(new: f64, old: f64) -> bool {
        new > old + 1e-14 * (1.0 + old.abs())
    }

    /// Coordinate and pairwise directions, plus directions along the faces
    /// (and in three dimensions the edges) of the rate polytope, so that the
    /// search cannot jam at a vertex of non-axis-aligned constraints.
    fn directions(&self) -> Vec<Vec<f64>> {
        let n = self.n();
        let unit = |i: usize| -> Vec<f64> { (0..n).map(|l| if l == i { 1.0 } else { 0.0 }).collect() };
        let mut dirs: Vec<Vec<f64>> = (0..n).map(unit).collect();
        for i in 0..n {
            for j in i + 1..n {
                for sign in [1.0, -1.0] {
                    let mut d = vec![0.0; n];
                    d[i] = 1.0;
                    d[j] = sign;
                    dirs.push(d);
                }
            }
        }
        let normals: Vec<Vec<f64>> = self.rates.rows.iter().cloned().chain((0..n).map(unit)).collect();
        let mut extra = Vec::new();
        for row in &self.rates.rows {
            for i in 0..n {
                for l in i + 1..n {
                    if row[i] != 0.0 || row[l] != 0.0 {
                        let mut d = vec![0.0; n];
                        d[i] = row[l];
                        d[l] = -row[i];
                        extra.push(d);
                    }
                }
            }
        }
        if n == 3 {
            for a in 0..normals.len() {
                for b in a + 1..normals.len() {
                    let (p, q) = (&normals[a], &normals[b]);
                    extra.push(vec![
                        p[1] * q[2] - p[2] * q[1],
                        p[2] * q[0] - p[0] * q[2],
                        p[0] * q[1] - p[1] * q[0],
                    ]);
                }
            }
        }
        for d in extra {
            let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm <= tolerance::LINALG {
                continue;
            }
            let d: Vec<f64> = d.iter().map(|x| x / norm).collect();
            let parallel = dirs.iter().any(|e| {
                let en = e.iter().map(|x| x * x).sum::<f64>().sqrt();
                let dot: f64 = e.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>() / en;
                dot.abs() >= 1.0 - 1e-12
            });
            if !parallel {
                dirs.push(d);
            }
        }
        dirs
    }

    /// Exact line searches along `directions` until a full sweep makes no
    /// progress.
    fn ascend(&self, start: Vec<f64>) -> (Vec<f64>, f64) {
        let n = self.n();
        let dirs = self.directions();
        let mut v = start;
        let mut f = self.objective(&v);
        for _ in 0..MAX_SWEEPS {
            let mut improved = false;
            for d in &dirs {
                if let Some((w, g)) = self.line_search(&v, d) {
                    if Self::improves(g, f) {
                        v = w;
                        f = g;
                        improved = true;
                    }
                }
            }
            if !improved || n == 1 {
                break;
            }
        }
        (v, f)
    }

    fn line_search(&self, v: &[f64], d: &[f64]) -> Option<(Vec<f64>, f64)> {
        let (lo, hi) = self.rates.line_interval(v, d);
        if !(hi - lo > 1e-15) {
            return None;
        }
        let point = |s: f64| -> Vec<f64> { v.iter().zip(d).map(|(v, d)| v + s * d).collect() };
        let eval = |s: f64| self.objective(&point(s));

        let mut knots = vec![lo, hi];
        let base = self.target(v);
        let step: Vec<f64> = d.iter().map(|d| self.dt * d).collect();
        let found = self.continuation.kinks(&base, &step, lo, hi);
        let exact = found.is_some();
        knots.extend(found.unwrap_or_default());
        if !exact {
            let step = (hi - lo) / UNIFORM_SEGMENTS as f64;
            knots.extend((1..UNIFORM_SEGMENTS).map(|k| lo + step * k as f64));
        }
        knots.sort_by(f64::total_cmp);
        knots.dedup_by(|a, b| (*a - *b).abs() <= 1e-14 * (1.0 + b.abs()));

        let values: Vec<f64> = knots.iter().map(|s| eval(*s)).collect();
        let (mut best_s, mut best_f) = (knots[0], values[0]);
        for (s, f) in knots.iter().zip(&values) {
            if *f > best_f {
                best_s = *s;
                best_f = *f;
            }
        }
        for k in 0..knots.len() - 1 {
            let (a, b) = (knots[k], knots[k + 1]);
            let m = 0.5 * (a + b);
            let fm = eval(m);
            if fm > best_f {
                best_s = m;
                best_f = fm;
            }
            let (fa, fb) = (values[k], values[k + 1]);
            let half = 0.5 * (b - a);
            let curvature = (fa - 2.0 * fm + fb) / (half * half);
            if curvature < 0.0 {
                let slope = (fb - fa) / (b - a);
                let s = m - slope / curvature;
                if s > a && s < b {
                    let fs = eval(s);
                    if fs > best_f {
                        best_s = s;
                        best_f = fs;
                    }
                }
            }
        }
        if !exact {
            let width = (hi - lo) / UNIFORM_SEGMENTS as f64;
            let (s, f) = golden_section(&eval, (best_s - width).max(lo), (best_s + width).min(hi));
            if f > best_f {
                best_s = s;
                best_f = f;
            }
        }
        Some((point(best_s), best_f))
    }

    fn continuation_gradient(&self, at: &[f64]) -> Vec<f64> {
        let base = self.continuation.value(at);
        (0..self.n())
            .map(|i| {
                let h = self.continuation.fd_step(i);
                let mut up = at.to_vec();
                up[i] += h;
                (self.continuation.value(&up) - base) / h
            })
            .collect()
    }

    fn gradient(&self, v: &[f64]) -> Vec<f64> {
        let target = self.target(v);
        let cont = self.continuation_gradient(&target);
        let pay = match self.payoff {
            PayoffSpec::LinearBox { .. } => self.x.to_vec(),
            PayoffSpec::LinearQuadratic { penalty_matrix } => self
                .x
                .iter()
                .zip(penalty_matrix)
                .map(|(x, row)| x - 2.0 * row.iter().zip(v).map(|(g, v)| g * v).sum::<f64>())
                .collect(),
        };
        pay.iter().zip(&cont).map(|(p, c)| self.dt * (p + c)).collect()
    }

    /// Projected gradient ascent from the incumbent with step `1/2` over a
    /// secant Lipschitz estimate; only improving iterates are kept.
    fn gradient_polish(&self, (mut v, mut f): (Vec<f64>, f64)) -> (Vec<f64>, f64) {
        let mut g = self.gradient(&v);
        let mut lipschitz = match self.hamiltonian {
            Hamiltonian::Quadratic(q) => 2.0 * self.dt * q.max_eigenvalue(),
            Hamiltonian::Linear { .. } => 0.0,
        };
        let mut step = if lipschitz > 0.0 { 0.5 / lipschitz } else { 1.0 };
        for _ in 0..PG_ITERATIONS {
            let trial: Vec<f64> = v.iter().zip(&g).map(|(v, g)| v + step * g).collect();
            let w = self.rates.project(&trial);
            let moved = w.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if moved < 1e-9 {
                break;
            }
            let fw = self.objective(&w);
            if Self::improves(fw, f) {
                let gw = self.gradient(&w);
                let dg = gw.iter().zip(&g).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                lipschitz = lipschitz.max(dg / moved);
                if lipschitz > 0.0 {
                    step = step.max(0.5 / lipschitz);
                }
                v = w;
                f = fw;
                g = gw;
            } else {
                step *= 0.5;
            }
        }
        (v, f)
    }
}

fn golden_section<F: Fn(f64) -> f64>(f: &F, mut a: f64, mut b: f64) -> (f64, f64) {
    let ratio = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..60 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d);
        }
    }
    if fc > fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_examples() {
        let h = hamiltonian_linear(&[1.0, 2.0], &[-0.5, -3.0], 2.0);
        assert_eq!(h.value, 1.0);
        assert_eq!(h.maximizer, vec![2.0, 0.0]);
        let h = hamiltonian_linear(&[0.0], &[0.0], 7.0);
        assert_eq!((h.value, h.maximizer), (0.0, vec![0.0]));
        let h = hamiltonian_linear(&[3.0], &[-3.0], 5.0);
        assert_eq!((h.value, h.maximizer), (0.0, vec![0.0]));
    }

    #[test]
    fn quadratic_examples() {
        let h = hamiltonian_quadratic(&[2.0], &[0.0], &[vec![1.0]]).unwrap();
        assert!((h.value - 1.0).abs() < 1e-15 && (h.maximizer[0] - 1.0).abs() < 1e-15);
        let h = hamiltonian_quadratic(&[1.0, 2.0], &[-1.0, -2.0], &[vec![2.0, 0.5], vec![0.5, 1.0]]).unwrap();
        assert_eq!(h.value, 0.0);
        assert!(h.maximizer.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn quadratic_two_dimensional_matches_grid_search() {
        // Dense grid over [-5, 5]^2 with spacing 0.01 contains the maximizer (1, 1).
        let (x, g) = ([2.0, 4.0], [vec![1.0, 0.0], vec![0.0, 2.0]]);
        let mut best = (f64::NEG_INFINITY, [0.0, 0.0]);
        for a in -500..=500 {
            for b in -500..=500 {
                let v = [a as f64 * 0.01, b as f64 * 0.01];
                let obj = v[0] * x[0] + v[1] * x[1] - v[0] * v[0] - 2.0 * v[1] * v[1];
                if obj > best.0 {
                    best = (obj, v);
                }
            }
        }
        assert!((best.0 - 3.0).abs() < 1e-12 && best.1 == [1.0, 1.0]);
        let h = hamiltonian_quadratic(&x, &[0.0, 0.0], &g).unwrap();
        assert!((h.value - 3.0).abs() < 1e-12);
        assert!((h.maximizer[0] - 1.0).abs() < 1e-12 && (h.maximizer[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn singular_penalty_is_rejected() {
        assert!(hamiltonian_quadratic(&[1.0, 1.0], &[0.0, 0.0], &[vec![1.0, 1.0], vec![1.0, 1.0]]).is_err());
        assert!(hamiltonian_quadratic(&[1.0, 1.0], &[0.0, 0.0], &[vec![1.0, 2.0], vec![2.0, 1.0]]).is_err());
    }

    #[test]
    fn budget_cap_binds() {
        let set = FeasibleSet::boxed(&[1.0]);
        let payoff = PayoffSpec::LinearBox { rate_cap: 1.0 };
        let zero = |_: &[f64]| 0.0;
        let r = one_step_maximize(&[2.0], 1.0, &[0.9], &set, &payoff, &zero).unwrap();
        assert!((r.maximizer[0] - 0.1).abs() < 1e-12);
        assert!((r.value - 0.2).abs() < 1e-12);
        assert_eq!(r.active_constraints, vec![0]);
    }

    #[test]
    fn linear_continuation_threshold() {
        let set = FeasibleSet::boxed(&[100.0]);
        let payoff = PayoffSpec::LinearBox { rate_cap: 2.0 };
        let cost = |y: &[f64]| -1.5 * y[0];
        for (x, expect) in [(2.0, 2.0), (1.0, 0.0)] {
            let r = one_step_maximize(&[x], 1.0, &[0.0], &set, &payoff, &cost).unwrap();
            assert!((r.maximizer[0] - expect).abs() < 1e-9, "x={x}: {:?}", r.maximizer);
        }
    }

    #[test]
    fn quadratic_step_matches_hamiltonian() {
        let set = FeasibleSet::boxed(&[10.0]);
        let payoff = PayoffSpec::LinearQuadratic {
            penalty_matrix: vec![vec![1.0]],
        };
        let zero = |_: &[f64]| 0.0;
        let r = one_step_maximize(&[2.0], 1.0, &[0.0], &set, &payoff, &zero).unwrap();
        assert!((r.maximizer[0] - 1.0).abs() < 1e-6);
        assert!((r.value - 1.0).abs() < 1e-9);
    }

    #[test]
    fn quadratic_step_two_dimensional_unconstrained() {
        let set = FeasibleSet::boxed(&[50.0, 50.0]);
        let g = vec![vec![2.0, 0.5], vec![0.5, 1.0]];
        let payoff = PayoffSpec::LinearQuadratic { penalty_matrix: g.clone() };
        let zero = |_: &[f64]| 0.0;
        let r = one_step_maximize(&[3.0, 1.0], 0.5, &[0.0, 0.0], &set, &payoff, &zero).unwrap();
        let h = hamiltonian_quadratic(&[3.0, 1.0], &[0.0, 0.0], &g).unwrap();
        assert!((r.value - 0.5 * h.value).abs() < 1e-8, "{} vs {}", r.value, 0.5 * h.value);
    }

    #[test]
    fn infeasible_state_errors() {
        let set = FeasibleSet::boxed(&[1.0]);
        let payoff = PayoffSpec::LinearBox { rate_cap: 1.0 };
        let zero = |_: &[f64]| 0.0;
        assert!(one_step_maximize(&[1.0], 1.0, &[1.2], &set, &payoff, &zero).is_err());
    }
}
