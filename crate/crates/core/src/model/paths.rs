use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tolerance;

/// How a sampled path is read between grid points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathShape {
    /// Right-continuous step function: `X(t) = X(t_j)` on `[t_j, t_{j+1})`.
    Step,
    /// Linear interpolation between grid points.
    Linear,
}

/// Monte-Carlo or enumerated carrier of process paths, `P x (N+1) x n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEnsemble {
    pub n: usize,
    pub time_grid: Vec<f64>,
    pub paths: Vec<Vec<Vec<f64>>>,
    pub weights: Vec<f64>,
    pub seed: Option<u64>,
    pub shape: PathShape,
    /// Lattice node visited at every stage, when the paths come from a lattice.
    pub nodes: Option<Vec<Vec<usize>>>,
    /// Weights are exact probabilities (full lattice enumeration) rather than
    /// sample frequencies.
    pub exact: bool,
}

impl PathEnsemble {
    /// Equally weighted ensemble.
    pub fn new(time_grid: Vec<f64>, paths: Vec<Vec<Vec<f64>>>, shape: PathShape, seed: Option<u64>) -> Result<Self> {
        let n = paths.first().and_then(|p| p.first()).map_or(0, Vec::len);
        let count = paths.len();
        let ensemble = Self {
            n,
            time_grid,
            paths,
            weights: vec![1.0 / count.max(1) as f64; count],
            seed,
            shape,
            nodes: None,
            exact: false,
        };
        let v = ensemble.violations();
        if v.is_empty() {
            Ok(ensemble)
        } else {
            Err(Error::InvalidInput(v.join("; ")))
        }
    }

    pub fn num_stages(&self) -> usize {
        self.time_grid.len().saturating_sub(1)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.paths.is_empty() {
            out.push("ensemble has no paths".into());
        }
        if self.time_grid.windows(2).any(|w| !(w[1] > w[0])) {
            out.push("time grid is not strictly increasing".into());
        }
        if self.weights.len() != self.paths.len() {
            out.push("weights and paths differ in length".into());
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > tolerance::LINALG || self.weights.iter().any(|w| !(*w >= 0.0)) {
            out.push(format!("weights must be nonnegative and sum to 1 (sum {total})"));
        }
        for (p, path) in self.paths.iter().enumerate() {
            if path.len() != self.time_grid.len() {
                out.push(format!("path {p} has {} points, grid has {}", path.len(), self.time_grid.len()));
            }
            if path.iter().any(|x| x.len() != self.n) {
                out.push(format!("path {p} has inconsistent dimension"));
            }
            if path.iter().flatten().any(|x| !(x.is_finite() && *x >= 0.0)) {
                out.push(format!("path {p} has a negative or non-finite value"));
            }
        }
        out
    }

    /// Reads `path_id, stage, x_1..x_n` rows; stages index a uniform grid on
    /// `[0, horizon]`. Paths are equally weighted and read as step functions.
    pub fn from_csv<R: Read>(reader: R, horizon: f64) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() < 3 || &headers[0] != "path_id" || &headers[1] != "stage" {
            return Err(Error::InvalidInput(
                "path CSV must start with columns path_id, stage, x_1..".into(),
            ));
        }
        let n = headers.len() - 2;
        let mut rows: BTreeMap<u64, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
        for record in rdr.records() {
            let record = record?;
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::InvalidInput(format!("cannot parse number '{s}'")))
            };
            let id: u64 = record[0]
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad path_id '{}'", &record[0])))?;
            let stage: usize = record[1]
                .parse()
                .map_err(|_| Error::InvalidInput(format!("bad stage '{}'", &record[1])))?;
            let x = (0..n).map(|i| parse(&record[i + 2])).collect::<Result<Vec<_>>>()?;
            if rows.entry(id).or_default().insert(stage, x).is_some() {
                return Err(Error::InvalidInput(format!("duplicate row for path {id} stage {stage}")));
            }
        }
        let stages = rows.values().next().map_or(0, |p| p.len());
        let mut paths = Vec::with_capacity(rows.len());
        for (id, p) in rows {
            if p.len() != stages || p.keys().enumerate().any(|(i, k)| i != *k) {
                return Err(Error::InvalidInput(format!("path {id} does not cover stages 0..{stages}")));
            }
            paths.push(p.into_values().collect());
        }
        if stages < 2 {
            return Err(Error::InvalidInput("paths need at least two stages".into()));
        }
        let grid = super::lattice::uniform_grid(stages - 1, horizon);
        Self::new(grid, paths, PathShape::Step, None)
    }

    /// Weighted mean of one value per path and its standard error; the error
    /// is zero for exact (enumerated) ensembles.
    pub fn mean_and_error(&self, values: &[f64]) -> (f64, f64) {
        let mean: f64 = values.iter().zip(&self.weights).map(|(v, w)| v * w).sum();
        let count = values.len();
        if self.exact || count < 2 {
            return (mean, 0.0);
        }
        let var: f64 = values.iter().zip(&self.weights).map(|(v, w)| w * (v - mean).powi(2)).sum();
        (mean, (var * count as f64 / (count - 1) as f64 / count as f64).sqrt())
    }

    /// `integral_a^b X(t) dt` for one path between grid indices `a < b`.
    fn integral(&self, path: &[Vec<f64>], a: usize, b: usize) -> Vec<f64> {
        let mut acc = vec![0.0; self.n];
        for j in a..b {
            let dt = self.time_grid[j + 1] - self.time_grid[j];
            for i in 0..self.n {
                acc[i] += match self.shape {
                    PathShape::Step => dt * path[j][i],
                    PathShape::Linear => 0.5 * dt * (path[j][i] + path[j + 1][i]),
                };
            }
        }
        acc
    }

    /// `sum_p w_p integral_0^T |Y_p(t) - X_p(t)|^2 dt` where `self` is a
    /// step-function ensemble on a coarser nested grid and `fine` is the
    /// reference.
    pub fn l2_distance_to(&self, fine: &PathEnsemble) -> Result<f64> {
        let map = nested_indices(&fine.time_grid, &self.time_grid)?;
        let mut total = 0.0;
        for (p, path) in fine.paths.iter().enumerate() {
            let coarse = &self.paths[p];
            let mut sum = 0.0;
            for k in 0..self.num_stages() {
                let c = &coarse[k];
                for j in map[k]..map[k + 1] {
                    let dt = fine.time_grid[j + 1] - fine.time_grid[j];
                    for i in 0..self.n {
                        let a = path[j][i] - c[i];
                        sum += match fine.shape {
                            PathShape::Step => dt * a * a,
                            PathShape::Linear => {
                                let b = path[j + 1][i] - c[i];
                                dt * (a * a + a * b + b * b) / 3.0
                            }
                        };
                    }
                }
            }
            total += fine.weights[p] * sum;
        }
        Ok(total)
    }
}

/// Per-path time averages over `coarse` equal groups of grid steps. The
/// result is a step-function ensemble on the coarse grid carrying `X(T)` at
/// the final point.
pub fn average_process(ensemble: &PathEnsemble, coarse: usize) -> Result<PathEnsemble> {
    let fine = ensemble.num_stages();
    if coarse == 0 || coarse > fine || !fine.is_multiple_of(coarse) {
        return Err(Error::InvalidInput(format!(
            "grid of {fine} steps is not nested with {coarse} coarse steps"
        )));
    }
    let ratio = fine / coarse;
    let time_grid: Vec<f64> = (0..=coarse).map(|k| ensemble.time_grid[k * ratio]).collect();
    let paths = ensemble
        .paths
        .iter()
        .map(|path| {
            let mut out = Vec::with_capacity(coarse + 1);
            for k in 0..coarse {
                let (a, b) = (k * ratio, (k + 1) * ratio);
                if ratio == 1 && ensemble.shape == PathShape::Step {
                    out.push(path[a].clone());
                    continue;
                }
                let span = ensemble.time_grid[b] - ensemble.time_grid[a];
                out.push(ensemble.integral(path, a, b).iter().map(|v| v / span).collect());
            }
            out.push(path[fine].clone());
            out
        })
        .collect();
    Ok(PathEnsemble {
        n: ensemble.n,
        time_grid,
        paths,
        weights: ensemble.weights.clone(),
        seed: ensemble.seed,
        shape: PathShape::Step,
        nodes: ensemble
            .nodes
            .as_ref()
            .map(|all| all.iter().map(|p| (0..=coarse).map(|k| p[k * ratio]).collect()).collect()),
        exact: ensemble.exact,
    })
}

fn nested_indices(fine: &[f64], coarse: &[f64]) -> Result<Vec<usize>> {
    coarse
        .iter()
        .map(|t| {
            fine.iter()
                .position(|f| (f - t).abs() <= 1e-12 * (1.0 + t.abs()))
                .ok_or_else(|| Error::InvalidInput(format!("coarse time {t} is not on the fine grid")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(m: usize) -> Vec<f64> {
        (0..=m).map(|j| j as f64 / m as f64).collect()
    }

    #[test]
    fn constant_path_is_a_fixed_point() {
        let e = PathEnsemble::new(grid(8), vec![vec![vec![3.0]; 9]], PathShape::Linear, None).unwrap();
        for n in [1, 2, 4, 8] {
            let a = average_process(&e, n).unwrap();
            assert!(a.paths[0].iter().all(|x| (x[0] - 3.0).abs() < 1e-15));
        }
    }

    #[test]
    fn ramp_averages_to_midpoint() {
        let g = grid(10);
        let path = g.iter().map(|t| vec![*t]).collect();
        let e = PathEnsemble::new(g, vec![path], PathShape::Linear, None).unwrap();
        let a = average_process(&e, 1).unwrap();
        assert!((a.paths[0][0][0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn averaging_step_ensemble_at_same_resolution_is_identity() {
        let e = PathEnsemble::new(
            grid(4),
            vec![vec![vec![0.3], vec![1.7], vec![0.1], vec![2.9], vec![1.1]]],
            PathShape::Step,
            None,
        )
        .unwrap();
        assert_eq!(average_process(&e, 4).unwrap(), e);
    }

    #[test]
    fn non_nested_grids_are_rejected() {
        let e = PathEnsemble::new(grid(6), vec![vec![vec![1.0]; 7]], PathShape::Step, None).unwrap();
        assert!(average_process(&e, 4).is_err());
        assert!(average_process(&e, 12).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let text = "path_id,stage,x_1,x_2\n0,0,1,2\n0,1,1.5,2\n1,0,1,2\n1,1,0.5,3\n";
        let e = PathEnsemble::from_csv(text.as_bytes(), 2.0).unwrap();
        assert_eq!(e.paths.len(), 2);
        assert_eq!(e.time_grid, vec![0.0, 2.0]);
        assert_eq!(e.paths[1][1], vec![0.5, 3.0]);
        let bad = "path_id,stage,x_1\n0,0,-1\n0,1,1\n";
        assert!(PathEnsemble::from_csv(bad.as_bytes(), 1.0).is_err());
    }
}
