use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::paths::{PathEnsemble, PathShape};
use crate::error::{Error, Result};
use crate::tolerance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeNode {
    pub value: Vec<f64>,
    /// Probability of reaching the node from the root.
    pub probability: f64,
    /// `(child index in the next stage, transition probability)`.
    pub children: Vec<(usize, f64)>,
}

/// Discrete-time scenario tree for the driving process. Conditional
/// expectations are exact through the transition probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeProcess {
    pub n: usize,
    pub time_grid: Vec<f64>,
    pub stages: Vec<Vec<LatticeNode>>,
}

/// Upper bound on enumerated lattice paths.
pub const MAX_ENUMERATED_PATHS: usize = 1 << 20;

impl LatticeProcess {
    pub fn new(time_grid: Vec<f64>, stages: Vec<Vec<LatticeNode>>) -> Result<Self> {
        let n = stages
            .first()
            .and_then(|s| s.first())
            .map_or(0, |node| node.value.len());
        let lattice = Self { n, time_grid, stages };
        let v = lattice.violations();
        if v.is_empty() {
            Ok(lattice)
        } else {
            Err(Error::InvalidInput(v.join("; ")))
        }
    }

    /// A single scenario: stage `k` has one node with value `values[k]`.
    pub fn deterministic(time_grid: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        let last = values.len().saturating_sub(1);
        let stages = values
            .into_iter()
            .enumerate()
            .map(|(k, value)| {
                vec![LatticeNode {
                    value,
                    probability: 1.0,
                    children: if k < last { vec![(0, 1.0)] } else { vec![] },
                }]
            })
            .collect();
        Self::new(time_grid, stages)
    }

    /// Constant scenario `x` on a uniform grid of `stages` steps over `[0, horizon]`.
    pub fn constant(x: &[f64], stages: usize, horizon: f64) -> Result<Self> {
        Self::deterministic(uniform_grid(stages, horizon), vec![x.to_vec(); stages + 1])
    }

    /// Recombining multiplicative tree with independent coordinates. Node
    /// indices are mixed-radix in the number of down moves per coordinate, so
    /// node 0 is the all-up node.
    pub fn binomial(
        stages: usize,
        horizon: f64,
        x0: &[f64],
        up: &[f64],
        down: &[f64],
        p_up: f64,
    ) -> Result<Self> {
        let n = x0.len();
        if up.len() != n || down.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: up.len().min(down.len()),
            });
        }
        if up.iter().chain(down).any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(Error::InvalidInput("binomial factors must be positive".into()));
        }
        if !(0.0..=1.0).contains(&p_up) {
            return Err(Error::InvalidInput(format!("p_up = {p_up} is not a probability")));
        }
        if x0.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::InvalidInput("initial value must be nonnegative".into()));
        }
        let mut out = Vec::with_capacity(stages + 1);
        for k in 0..=stages {
            let side = k + 1;
            let count = side.pow(n as u32);
            let mut nodes = Vec::with_capacity(count);
            for idx in 0..count {
                let downs = mixed_radix(idx, side, n);
                let mut value = Vec::with_capacity(n);
                let mut probability = 1.0;
                for i in 0..n {
                    let d = downs[i];
                    value.push(x0[i] * up[i].powi((k - d) as i32) * down[i].powi(d as i32));
                    probability *= binomial_coefficient(k, d)
                        * p_up.powi((k - d) as i32)
                        * (1.0 - p_up).powi(d as i32);
                }
                let children = if k < stages {
                    (0..1usize << n)
                        .map(|mask| {
                            let mut child = 0;
                            let mut p = 1.0;
                            for i in (0..n).rev() {
                                let went_down = (mask >> i) & 1;
                                child = child * (side + 1) + downs[i] + went_down;
                                p *= if went_down == 1 { 1.0 - p_up } else { p_up };
                            }
                            (child, p)
                        })
                        .collect()
                } else {
                    vec![]
                };
                nodes.push(LatticeNode {
                    value,
                    probability,
                    children,
                });
            }
            out.push(nodes);
        }
        Self::new(uniform_grid(stages, horizon), out)
    }

    /// Number of time steps `N` (the grid has `N + 1` points).
    pub fn num_stages(&self) -> usize {
        self.time_grid.len().saturating_sub(1)
    }

    pub fn horizon(&self) -> f64 {
        *self.time_grid.last().unwrap_or(&0.0)
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.time_grid[k + 1] - self.time_grid[k]
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.time_grid.len() < 2 {
            out.push("time grid needs at least two points".into());
            return out;
        }
        if self.time_grid[0] != 0.0 {
            out.push("time grid must start at 0".into());
        }
        if self.time_grid.windows(2).any(|w| !(w[1] > w[0])) {
            out.push("time grid is not strictly increasing".into());
        }
        if self.stages.len() != self.time_grid.len() {
            out.push(format!(
                "lattice has {} stages but the time grid has {} points",
                self.stages.len(),
                self.time_grid.len()
            ));
            return out;
        }
        if self.stages[0].len() != 1 {
            out.push("stage 0 must hold exactly one node".into());
        }
        let last = self.stages.len() - 1;
        for (k, nodes) in self.stages.iter().enumerate() {
            if nodes.is_empty() {
                out.push(format!("stage {k} has no nodes"));
                continue;
            }
            let total: f64 = nodes.iter().map(|n| n.probability).sum();
            if (total - 1.0).abs() > tolerance::AGGREGATE {
                out.push(format!("stage {k} reach probabilities sum to {total}"));
            }
            for (j, node) in nodes.iter().enumerate() {
                if node.value.len() != self.n {
                    out.push(format!("node ({k},{j}) has dimension {}", node.value.len()));
                }
                if node.value.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                    out.push(format!("node ({k},{j}) has a negative or non-finite value"));
                }
                if !(node.probability >= 0.0) {
                    out.push(format!("node ({k},{j}) has a negative reach probability"));
                }
                if k == last {
                    continue;
                }
                let mut sum = 0.0;
                for &(c, p) in &node.children {
                    if c >= self.stages[k + 1].len() {
                        out.push(format!("node ({k},{j}) points to missing child {c}"));
                    }
                    if !(p >= 0.0) {
                        out.push(format!("node ({k},{j}) has a negative transition probability"));
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > tolerance::LINALG {
                    out.push(format!("transitions out of node ({k},{j}) sum to {sum}"));
                }
            }
            if k > 0 && out.is_empty() {
                let pushed = self.push_forward(k - 1);
                for (j, node) in nodes.iter().enumerate() {
                    if (pushed[j] - node.probability).abs() > tolerance::AGGREGATE {
                        out.push(format!(
                            "node ({k},{j}) reach probability {} differs from push-forward {}",
                            node.probability, pushed[j]
                        ));
                    }
                }
            }
        }
        out
    }

    /// Reach probabilities of stage `k + 1` obtained from those of stage `k`.
    pub fn push_forward(&self, k: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.stages[k + 1].len()];
        for node in &self.stages[k] {
            for &(c, p) in &node.children {
                out[c] += node.probability * p;
            }
        }
        out
    }

    /// `E[g(node at stage N) | node at stage k]` for every stage and node.
    pub fn conditional_expectations<F>(&self, terminal: F) -> Vec<Vec<Vec<f64>>>
    where
        F: Fn(&[f64]) -> Vec<f64>,
    {
        let last = self.num_stages();
        let mut out = vec![Vec::new(); last + 1];
        out[last] = self.stages[last].iter().map(|node| terminal(&node.value)).collect();
        for k in (0..last).rev() {
            out[k] = self.stages[k]
                .iter()
                .map(|node| {
                    let mut acc = vec![0.0; out[k + 1][0].len()];
                    for &(c, p) in &node.children {
                        for (a, v) in acc.iter_mut().zip(&out[k + 1][c]) {
                            *a += p * v;
                        }
                    }
                    acc
                })
                .collect();
        }
        out
    }

    pub fn path_count(&self) -> usize {
        let last = self.num_stages();
        let mut counts = vec![1usize; self.stages[last].len()];
        for k in (0..last).rev() {
            counts = self.stages[k]
                .iter()
                .map(|node| {
                    node.children
                        .iter()
                        .filter(|(_, p)| *p > 0.0)
                        .fold(0usize, |acc, (c, _)| acc.saturating_add(counts[*c]))
                })
                .collect();
        }
        counts[0]
    }

    /// Every root-to-leaf path with positive probability, weighted by its
    /// probability. Expectations over the result are exact.
    pub fn enumerate_paths(&self) -> Result<PathEnsemble> {
        let count = self.path_count();
        if count > MAX_ENUMERATED_PATHS {
            return Err(Error::CapsExceeded(format!(
                "lattice has {count} paths (limit {MAX_ENUMERATED_PATHS})"
            )));
        }
        let mut node_paths = Vec::with_capacity(count);
        let mut weights = Vec::with_capacity(count);
        let mut stack = vec![(vec![0usize], 1.0)];
        let last = self.num_stages();
        while let Some((path, w)) = stack.pop() {
            let k = path.len() - 1;
            if k == last {
                node_paths.push(path);
                weights.push(w);
                continue;
            }
            let node = &self.stages[k][path[k]];
            for &(c, p) in node.children.iter().rev() {
                if p > 0.0 {
                    let mut next = path.clone();
                    next.push(c);
                    stack.push((next, w * p));
                }
            }
        }
        Ok(self.ensemble_from_nodes(node_paths, weights, None, true))
    }

    /// Monte-Carlo sample of `count` paths with equal weights.
    pub fn sample_paths(&self, count: usize, seed: u64) -> PathEnsemble {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = self.num_stages();
        let node_paths: Vec<Vec<usize>> = (0..count)
            .map(|_| {
                let mut path = Vec::with_capacity(last + 1);
                path.push(0);
                for k in 0..last {
                    let node = &self.stages[k][path[k]];
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut chosen = node.children.last().map_or(0, |c| c.0);
                    for &(c, p) in &node.children {
                        acc += p;
                        if u < acc {
                            chosen = c;
                            break;
                        }
                    }
                    path.push(chosen);
                }
                path
            })
            .collect();
        let weights = vec![1.0 / count as f64; count];
        self.ensemble_from_nodes(node_paths, weights, Some(seed), false)
    }

    fn ensemble_from_nodes(
        &self,
        node_paths: Vec<Vec<usize>>,
        weights: Vec<f64>,
        seed: Option<u64>,
        exact: bool,
    ) -> PathEnsemble {
        let paths = node_paths
            .iter()
            .map(|p| {
                p.iter()
                    .enumerate()
                    .map(|(k, &j)| self.stages[k][j].value.clone())
                    .collect()
            })
            .collect();
        PathEnsemble {
            n: self.n,
            time_grid: self.time_grid.clone(),
            paths,
            weights,
            seed,
            shape: PathShape::Step,
            nodes: Some(node_paths),
            exact,
        }
    }

    /// Relabels nodes: old node `i` of stage `k` becomes `perms[k][i]`.
    pub fn permuted(&self, perms: &[Vec<usize>]) -> Result<Self> {
        let mut stages = Vec::with_capacity(self.stages.len());
        for (k, nodes) in self.stages.iter().enumerate() {
            let mut out: Vec<Option<LatticeNode>> = vec![None; nodes.len()];
            for (i, node) in nodes.iter().enumerate() {
                let mut node = node.clone();
                if k + 1 < self.stages.len() {
                    for child in node.children.iter_mut() {
                        child.0 = perms[k + 1][child.0];
                    }
                }
                out[perms[k][i]] = Some(node);
            }
            let nodes: Option<Vec<_>> = out.into_iter().collect();
            stages.push(nodes.ok_or_else(|| Error::InvalidInput("not a permutation".into()))?);
        }
        Self::new(self.time_grid.clone(), stages)
    }

    /// Piecewise-constant conditional averaging onto `coarse` equal groups of
    /// fine steps: each coarse node carries
    /// `E[average of X over its interval | node]`, and transitions are the
    /// multi-step transition probabilities of the fine tree.
    pub fn coarsen(&self, coarse: usize) -> Result<Self> {
        let fine = self.num_stages();
        if coarse == 0 || !fine.is_multiple_of(coarse) {
            return Err(Error::InvalidInput(format!(
                "coarse stage count {coarse} does not divide fine stage count {fine}"
            )));
        }
        let ratio = fine / coarse;
        let mut stages = Vec::with_capacity(coarse + 1);
        for k in 0..coarse {
            let start = k * ratio;
            let end = start + ratio;
            let span = self.time_grid[end] - self.time_grid[start];
            let nodes = self.stages[start]
                .iter()
                .enumerate()
                .map(|(j, node)| {
                    let mut dist = vec![0.0; self.stages[start].len()];
                    dist[j] = 1.0;
                    let mut integral = vec![0.0; self.n];
                    for l in start..end {
                        let dt = self.dt(l);
                        let mut next = vec![0.0; self.stages[l + 1].len()];
                        for (i, w) in dist.iter().enumerate() {
                            if *w == 0.0 {
                                continue;
                            }
                            let nd = &self.stages[l][i];
                            for (acc, x) in integral.iter_mut().zip(&nd.value) {
                                *acc += dt * w * x;
                            }
                            for &(c, p) in &nd.children {
                                next[c] += w * p;
                            }
                        }
                        dist = next;
                    }
                    let value = if ratio == 1 {
                        node.value.clone()
                    } else {
                        integral.iter().map(|v| v / span).collect()
                    };
                    LatticeNode {
                        value,
                        probability: node.probability,
                        children: dist
                            .iter()
                            .enumerate()
                            .filter(|(_, p)| **p > 0.0)
                            .map(|(c, p)| (c, *p))
                            .collect(),
                    }
                })
                .collect();
            stages.push(nodes);
        }
        stages.push(self.stages[fine].clone());
        let time_grid = (0..=coarse).map(|k| self.time_grid[k * ratio]).collect();
        Self::new(time_grid, stages)
    }

    /// Largest `sum_i X_i` over non-terminal nodes.
    pub fn max_stage_sum(&self) -> f64 {
        self.stages[..self.num_stages()]
            .iter()
            .flatten()
            .map(|n| n.value.iter().sum::<f64>())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn uniform_grid(stages: usize, horizon: f64) -> Vec<f64> {
    (0..=stages)
        .map(|k| if k == stages { horizon } else { horizon * k as f64 / stages as f64 })
        .collect()
}

fn mixed_radix(mut idx: usize, radix: usize, digits: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(digits);
    for _ in 0..digits {
        out.push(idx % radix);
        idx /= radix;
    }
    out
}

fn binomial_coefficient(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}
