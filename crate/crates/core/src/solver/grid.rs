use std::sync::OnceLock;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::FeasibleSet;
use crate::tolerance;

pub const DEFAULT_KNOTS: usize = 65;

/// Largest dimension interpolated by the cell envelope.
pub const MAX_ENVELOPE_DIM: usize = 2;

struct CubeSimplex {
    corners: Vec<usize>,
    /// Row-major inverse of the matrix whose columns are `(corner, 1)`.
    inverse: Vec<f64>,
}

/// Non-degenerate simplices spanned by `n + 1` corners of the unit cube.
fn cube_simplices(n: usize) -> &'static [CubeSimplex] {
    static TABLES: [OnceLock<Vec<CubeSimplex>>; MAX_ENVELOPE_DIM + 1] =
        [OnceLock::new(), OnceLock::new(), OnceLock::new()];
    TABLES[n].get_or_init(|| {
        let corners = 1usize << n;
        let mut out = Vec::new();
        let mut pick: Vec<usize> = (0..=n).collect();
        loop {
            let a = DMatrix::from_fn(n + 1, n + 1, |r, c| {
                if r == n {
                    1.0
                } else {
                    ((pick[c] >> r) & 1) as f64
                }
            });
            if a.determinant().abs() > 1e-9 {
                let inv = a.try_inverse().expect("non-singular");
                out.push(CubeSimplex {
                    corners: pick.clone(),
                    inverse: (0..=n).flat_map(|r| (0..=n).map(move |c| (r, c))).map(|(r, c)| inv[(r, c)]).collect(),
                });
            }
            // next (n + 1)-subset in lexicographic order
            let Some(i) = (0..=n).rev().find(|&i| pick[i] < corners - (n + 1 - i)) else {
                break;
            };
            pick[i] += 1;
            for j in i + 1..=n {
                pick[j] = pick[j - 1] + 1;
            }
        }
        out
    })
}

type CubePlane = ([f64; MAX_ENVELOPE_DIM], f64);

/// Planes `sigma . t = c` through at least `n` unit-cube corners that cut the
/// open cube; the envelope is affine between them.
fn cube_planes(n: usize) -> &'static [CubePlane] {
    static TABLES: [OnceLock<Vec<CubePlane>>; MAX_ENVELOPE_DIM + 1] =
        [OnceLock::new(), OnceLock::new(), OnceLock::new()];
    TABLES[n].get_or_init(|| {
        let mut out = Vec::new();
        for code in 0..3usize.pow(n as u32) {
            let mut sigma = [0.0; MAX_ENVELOPE_DIM];
            let mut m = code;
            for s in sigma.iter_mut().take(n) {
                *s = (m % 3) as f64 - 1.0;
                m /= 3;
            }
            let nonzero: Vec<f64> = sigma[..n].iter().copied().filter(|s| *s != 0.0).collect();
            if nonzero.len() < 2 || nonzero[0] < 0.0 {
                continue;
            }
            let lo: f64 = sigma[..n].iter().filter(|s| **s < 0.0).sum();
            let hi: f64 = sigma[..n].iter().filter(|s| **s > 0.0).sum();
            let mut c = lo + 1.0;
            while c < hi {
                out.push((sigma, c));
                c += 1.0;
            }
        }
        out
    })
}

/// Tensor grid of cumulative-consumption states over `[0, max_i]` per axis.
///
/// Points are stored row-major: the last axis varies fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetGrid {
    pub knots: Vec<Vec<f64>>,
    /// Membership of every point in the feasible set.
    pub inside: Vec<bool>,
    strides: Vec<usize>,
    /// Outside points in increasing order of index sum, so each one's lower
    /// neighbours are known before it is filled.
    outside_order: Vec<usize>,
}

impl BudgetGrid {
    /// `knots_per_axis` uniform knots on `[0, coordinate_max(i)]`.
    pub fn uniform(set: &FeasibleSet, knots_per_axis: usize) -> Result<Self> {
        if knots_per_axis < 2 {
            return Err(Error::InvalidInput("a budget grid needs at least 2 knots per axis".into()));
        }
        let knots = (0..set.n)
            .map(|i| {
                let top = set.coordinate_max(i);
                let last = knots_per_axis - 1;
                (0..knots_per_axis)
                    .map(|k| if k == last { top } else { top * k as f64 / last as f64 })
                    .collect()
            })
            .collect();
        Self::from_knots(set, knots)
    }

    pub fn from_knots(set: &FeasibleSet, knots: Vec<Vec<f64>>) -> Result<Self> {
        check_dim(set.n, knots.len())?;
        for (i, axis) in knots.iter().enumerate() {
            if axis.len() < 2 || axis[0] != 0.0 || axis.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::InvalidInput(format!(
                    "knots on axis {i} must start at 0 and increase strictly"
                )));
            }
        }
        let mut strides = vec![1; knots.len()];
        for i in (0..knots.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * knots[i + 1].len();
        }
        let len = knots.iter().map(Vec::len).product();
        let mut grid = Self {
            knots,
            inside: Vec::new(),
            strides,
            outside_order: Vec::new(),
        };
        grid.inside = (0..len)
            .map(|p| set.contains_with_slack(&grid.point(p), tolerance::LINALG))
            .collect();
        let mut order: Vec<usize> = (0..len).filter(|p| !grid.inside[*p]).collect();
        order.sort_by_key(|p| (grid.multi_index(*p).iter().sum::<usize>(), *p));
        grid.outside_order = order;
        if !grid.inside.iter().any(|b| *b) {
            return Err(Error::Infeasible("budget grid has no point inside the feasible set".into()));
        }
        Ok(grid)
    }

    pub fn dim(&self) -> usize {
        self.knots.len()
    }

    pub fn len(&self) -> usize {
        self.inside.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inside.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.knots.iter().map(Vec::len).collect()
    }

    pub fn multi_index(&self, mut p: usize) -> Vec<usize> {
        self.strides
            .iter()
            .map(|s| {
                let i = p / s;
                p %= s;
                i
            })
            .collect()
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn point(&self, p: usize) -> Vec<f64> {
        self.multi_index(p)
            .iter()
            .zip(&self.knots)
            .map(|(i, k)| k[*i])
            .collect()
    }

    /// Neighbour of `p` one knot along `axis` in direction `step` (`+1` or `-1`).
    pub fn neighbor(&self, p: usize, axis: usize, step: isize) -> Option<usize> {
        let i = (p / self.strides[axis]) % self.knots[axis].len();
        let j = i as isize + step;
        if j < 0 || j >= self.knots[axis].len() as isize {
            None
        } else {
            Some((p as isize + step * self.strides[axis] as isize) as usize)
        }
    }

    pub fn is_last_knot(&self, p: usize, axis: usize) -> bool {
        self.neighbor(p, axis, 1).is_none()
    }

    /// Inside point whose axis neighbours are all inside and not on the box edges.
    pub fn is_interior(&self, p: usize) -> bool {
        self.inside[p]
            && (0..self.dim()).all(|a| {
                [-1, 1].iter().all(|s| match self.neighbor(p, a, *s) {
                    Some(q) => self.inside[q] && self.neighbor(q, a, *s).is_some(),
                    None => false,
                })
            })
    }

    /// Forward difference of `values` at `p` along `axis`; backward at the
    /// last knot. The flag is true when the backward form was used.
    pub fn forward_difference(&self, values: &[f64], p: usize, axis: usize) -> (f64, bool) {
        let k = &self.knots[axis];
        let i = (p / self.strides[axis]) % k.len();
        match self.neighbor(p, axis, 1) {
            Some(q) => ((values[q] - values[p]) / (k[i + 1] - k[i]), false),
            None => {
                let q = p - self.strides[axis];
                ((values[p] - values[q]) / (k[i] - k[i - 1]), true)
            }
        }
    }

    /// Lower knot index and weight in `[0, 1]` locating `x` on `axis`;
    /// clamps to the box.
    fn locate(&self, axis: usize, x: f64) -> (usize, f64) {
        let k = &self.knots[axis];
        let last = k.len() - 1;
        if x <= k[0] {
            return (0, 0.0);
        }
        if x >= k[last] {
            return (last - 1, 1.0);
        }
        let hi = k.partition_point(|v| *v <= x).min(last);
        let lo = hi - 1;
        (lo, (x - k[lo]) / (k[hi] - k[lo]))
    }

    /// Multilinear interpolation of point values; `y` must lie in the
    /// bounding box (within the feasibility slack).
    pub fn interpolate(&self, values: &[f64], y: &[f64]) -> Result<f64> {
        check_dim(self.dim(), y.len())?;
        for (i, (x, k)) in y.iter().zip(&self.knots).enumerate() {
            let top = k[k.len() - 1];
            if !(*x >= -tolerance::FEASIBILITY && *x <= top + tolerance::FEASIBILITY * (1.0 + top)) {
                return Err(Error::InvalidInput(format!(
                    "coordinate {i} = {x} outside grid box [0, {top}]"
                )));
            }
        }
        Ok(self.interpolate_clamped(values, y))
    }

    /// Multilinear interpolation after clamping `y` into the bounding box.
    pub fn interpolate_clamped(&self, values: &[f64], y: &[f64]) -> f64 {
        let mut acc = 0.0;
        self.for_each_corner(y, |p, w| acc += w * values[p]);
        acc
    }

    /// Concave envelope of the corner values of the cell containing `y`
    /// (clamped into the box): the largest convex combination of corner
    /// values over corner simplices containing `y`. It agrees with the grid
    /// values at knots and with linear interpolation on cell edges, and is
    /// concave inside every cell. Higher dimensions use multilinear
    /// interpolation.
    pub fn envelope_clamped(&self, values: &[f64], y: &[f64]) -> f64 {
        let n = self.dim();
        if n == 1 || n > MAX_ENVELOPE_DIM {
            return self.interpolate_clamped(values, y);
        }
        let cell: Vec<(usize, f64)> = (0..n).map(|a| self.locate(a, y[a])).collect();
        let base: usize = cell.iter().enumerate().map(|(a, (lo, _))| lo * self.strides[a]).sum();
        let corner = |mask: usize| -> f64 {
            let offset: usize = (0..n).filter(|a| (mask >> a) & 1 == 1).map(|a| self.strides[a]).sum();
            values[base + offset]
        };
        let mut best = f64::NEG_INFINITY;
        let mut lambda = [0.0; MAX_ENVELOPE_DIM + 1];
        for simplex in cube_simplices(n) {
            let mut ok = true;
            for (k, row) in simplex.inverse.chunks(n + 1).enumerate() {
                let l = row[n] + (0..n).map(|a| row[a] * cell[a].1).sum::<f64>();
                if l < -1e-12 {
                    ok = false;
                    break;
                }
                lambda[k] = l;
            }
            if ok {
                let v: f64 = simplex.corners.iter().zip(&lambda).map(|(m, l)| l * corner(*m)).sum();
                best = best.max(v);
            }
        }
        if best.is_finite() {
            best
        } else {
            self.interpolate_clamped(values, y)
        }
    }

    /// Parameters `s` in `(lo, hi)` where `base + s * dir` crosses a knot or
    /// a plane along which the cell envelope may bend.
    pub fn envelope_kinks(&self, base: &[f64], dir: &[f64], lo: f64, hi: f64) -> Vec<f64> {
        let n = self.dim();
        let mut out = Vec::new();
        for (a, k) in self.knots.iter().enumerate() {
            if dir[a] == 0.0 {
                continue;
            }
            for b in k {
                let s = (b - base[a]) / dir[a];
                if s > lo && s < hi {
                    out.push(s);
                }
            }
        }
        if n == 1 || n > MAX_ENVELOPE_DIM {
            return out;
        }
        let mut cuts = out.clone();
        cuts.extend([lo, hi]);
        cuts.sort_by(f64::total_cmp);
        for w in cuts.windows(2) {
            let (a0, b0) = (w[0], w[1]);
            if !(b0 - a0 > 1e-15) {
                continue;
            }
            let mid = 0.5 * (a0 + b0);
            // local coordinate t_a(s) = offset_a + s * rate_a within this cell
            let (mut offset, mut rate) = ([0.0; MAX_ENVELOPE_DIM], [0.0; MAX_ENVELOPE_DIM]);
            for a in 0..n {
                let (i, _) = self.locate(a, base[a] + mid * dir[a]);
                let k = &self.knots[a];
                let h = k[i + 1] - k[i];
                offset[a] = (base[a] - k[i]) / h;
                rate[a] = dir[a] / h;
            }
            for (sigma, c) in cube_planes(n) {
                let alpha: f64 = (0..n).map(|a| sigma[a] * offset[a]).sum();
                let beta: f64 = (0..n).map(|a| sigma[a] * rate[a]).sum();
                if beta.abs() < 1e-300 {
                    continue;
                }
                let s = (c - alpha) / beta;
                if s > a0 && s < b0 {
                    out.push(s);
                }
            }
        }
        out
    }

    /// Calls `f(point, weight)` for the `2^n` cell corners around `y`.
    pub fn for_each_corner<F: FnMut(usize, f64)>(&self, y: &[f64], mut f: F) {
        let n = self.dim();
        let cell: Vec<(usize, f64)> = (0..n).map(|a| self.locate(a, y[a])).collect();
        for mask in 0..1usize << n {
            let mut w = 1.0;
            let mut p = 0;
            for (a, (lo, t)) in cell.iter().enumerate() {
                let up = (mask >> a) & 1 == 1;
                w *= if up { *t } else { 1.0 - t };
                p += (lo + usize::from(up)) * self.strides[a];
            }
            if w != 0.0 {
                f(p, w);
            }
        }
    }

    /// Fills values at outside points by linear extrapolation from known
    /// points: the minimum, over every lattice direction `d` in
    /// `{-1, 0, 1}^n` with `c - d` and `c - 2d` known and collinear with `c`,
    /// of `J(c - d) + t (J(c - d) - J(c - 2d))`. Falls back to the smallest
    /// known neighbour when no such pair exists.
    pub fn extrapolate(&self, values: &mut [f64]) {
        let n = self.dim();
        let dirs: Vec<Vec<isize>> = (1..3usize.pow(n as u32))
            .map(|mut m| {
                (0..n)
                    .map(|_| {
                        let d = (m % 3) as isize - 1;
                        m /= 3;
                        d
                    })
                    .collect()
            })
            .filter(|d: &Vec<isize>| d.iter().any(|x| *x != 0))
            .collect();
        let mut known = self.inside.clone();
        for &p in &self.outside_order {
            let c = self.multi_index(p);
            let (mut best, mut fallback) = (f64::INFINITY, f64::INFINITY);
            for d in &dirs {
                let Some(q) = self.offset(&c, d, 1) else { continue };
                if !known[q] {
                    continue;
                }
                fallback = fallback.min(values[q]);
                let Some(r) = self.offset(&c, d, 2) else { continue };
                if !known[r] {
                    continue;
                }
                let mut ratio = None;
                let mut collinear = true;
                for (a, &da) in d.iter().enumerate() {
                    if da == 0 {
                        continue;
                    }
                    let k = &self.knots[a];
                    let i = c[a] as isize;
                    let (x0, x1, x2) = (k[i as usize], k[(i - da) as usize], k[(i - 2 * da) as usize]);
                    let t = (x0 - x1) / (x1 - x2);
                    match ratio {
                        None => ratio = Some(t),
                        Some(s) if (s - t).abs() <= 1e-12 * s.abs().max(1.0) => {}
                        Some(_) => collinear = false,
                    }
                }
                if let (true, Some(t)) = (collinear, ratio) {
                    best = best.min(values[q] + t * (values[q] - values[r]));
                }
            }
            values[p] = if best.is_finite() { best } else { fallback };
            known[p] = true;
        }
    }

    fn offset(&self, c: &[usize], d: &[isize], times: isize) -> Option<usize> {
        let mut p = 0;
        for (a, (&ci, &di)) in c.iter().zip(d).enumerate() {
            let i = ci as isize - times * di;
            if i < 0 || i >= self.knots[a].len() as isize {
                return None;
            }
            p += i as usize * self.strides[a];
        }
        Some(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_square() -> BudgetGrid {
        BudgetGrid::uniform(&FeasibleSet::boxed(&[1.0, 1.0]), 2).unwrap()
    }

    #[test]
    fn envelope_takes_the_higher_diagonal() {
        let grid = unit_square();
        // corners (0,0), (0,1), (1,0), (1,1) in row-major order
        let values = [0.0, 1.0, 1.0, 0.0];
        let centre = grid.envelope_clamped(&values, &[0.5, 0.5]);
        assert!((centre - 1.0).abs() < 1e-12);
        assert!((grid.interpolate_clamped(&values, &[0.5, 0.5]) - 0.5).abs() < 1e-12);
        for (p, v) in values.iter().enumerate() {
            assert!((grid.envelope_clamped(&values, &grid.point(p)) - v).abs() < 1e-12);
        }
        // edges are linear
        assert!((grid.envelope_clamped(&values, &[0.25, 0.0]) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn envelope_is_concave_along_the_twisted_diagonal() {
        let grid = unit_square();
        let values = [0.0, -0.3, -0.2, -1.0];
        let f = |s: f64| grid.envelope_clamped(&values, &[s, s]);
        for k in 1..20 {
            let (a, b, c) = (f((k - 1) as f64 / 20.0), f(k as f64 / 20.0), f((k + 1) as f64 / 20.0));
            assert!(a - 2.0 * b + c <= 1e-12);
        }
    }

    #[test]
    fn kinks_include_knots_and_cell_diagonals() {
        let grid = BudgetGrid::uniform(&FeasibleSet::boxed(&[2.0, 2.0]), 3).unwrap();
        let mut kinks = grid.envelope_kinks(&[0.0, 0.5], &[1.0, 0.0], 0.0, 2.0);
        kinks.sort_by(f64::total_cmp);
        // knot at 1, diagonals t0 = t1 at 0.5 and t0 + t1 = 1 at 0.5 in the
        // first cell, and the same pair at 1.5 in the second
        let expected = [0.5, 0.5, 1.0, 1.5, 1.5];
        assert_eq!(kinks.len(), expected.len());
        for (k, e) in kinks.iter().zip(expected) {
            assert!((k - e).abs() < 1e-12);
        }
    }

    #[test]
    fn extrapolation_takes_the_lowest_lattice_line() {
        let set = FeasibleSet::new(vec![vec![1.0, 1.0]], vec![1.0]);
        let grid = BudgetGrid::uniform(&set, 3).unwrap();
        // J = -(y0 + y1)^2 on inside points, knots 0, 0.5, 1
        let mut values: Vec<f64> = (0..grid.len())
            .map(|p| {
                let y = grid.point(p);
                if grid.inside[p] { -(y[0] + y[1]).powi(2) } else { f64::NAN }
            })
            .collect();
        grid.extrapolate(&mut values);
        let at = |i: usize, j: usize| values[grid.flat_index(&[i, j])];
        assert!((at(1, 2) + 1.75).abs() < 1e-12);
        assert!((at(2, 1) + 1.75).abs() < 1e-12);
        // axis lines give -2.5, the diagonal through (0,0) and (1,1) gives -2
        assert!((at(2, 2) + 2.5).abs() < 1e-12);
    }
}
