//! Per-snapshot correlation graphs and their static compression.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_TAU: usize = 3;

/// Node features `x: [N, T, d]` with one dense `N x N` adjacency per snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalGraph {
    pub x: Tensor,
    /// `adj[t][i * N + j]` is the weight of edge `i -> j` at step `t`.
    pub adj: Vec<Vec<f64>>,
    pub directed: bool,
}

/// An edge of the aggregated set with its weight at every step (0 where absent).
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeSeries {
    pub src: usize,
    pub dst: usize,
    pub weights: Vec<f64>,
}

impl TemporalGraph {
    pub fn new(x: Tensor, adj: Vec<Vec<f64>>, directed: bool) -> Result<Self> {
        if x.rank() != 3 {
            return Err(Error::shape("temporal_graph", x.shape(), &[0, 0, 0]));
        }
        let (n, t) = (x.shape()[0], x.shape()[1]);
        if adj.len() != t || adj.iter().any(|a| a.len() != n * n) {
            return Err(Error::Structural(format!(
                "adjacency stack must hold {t} matrices of {n}x{n}"
            )));
        }
        for a in &adj {
            if a.iter().any(|w| !w.is_finite() || *w < 0.0) {
                return Err(Error::Structural("edge weights must be finite and non-negative".into()));
            }
            if (0..n).any(|i| a[i * n + i] != 0.0) {
                return Err(Error::Structural("adjacency carries a self-loop".into()));
            }
        }
        Ok(TemporalGraph { x, adj, directed })
    }

    pub fn nodes(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn steps(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn feature_dim(&self) -> usize {
        self.x.shape()[2]
    }

    pub fn weight(&self, i: usize, j: usize, t: usize) -> f64 {
        self.adj[t][i * self.nodes() + j]
    }

    /// Nonzero edges `(i, j, w)` at step `t` in row-major order.
    pub fn edges_at(&self, t: usize) -> Vec<(usize, usize, f64)> {
        let n = self.nodes();
        self.adj[t]
            .iter()
            .enumerate()
            .filter(|(_, &w)| w != 0.0)
            .map(|(k, &w)| (k / n, k % n, w))
            .collect()
    }

    pub fn edge_count(&self, t: usize) -> usize {
        self.adj[t].iter().filter(|&&w| w != 0.0).count()
    }

    /// Union over steps of nonzero edges, sorted by `(src, dst)`.
    pub fn aggregated_edges(&self) -> Vec<EdgeSeries> {
        let n = self.nodes();
        (0..n * n)
            .filter(|&k| self.adj.iter().any(|a| a[k] != 0.0))
            .map(|k| EdgeSeries {
                src: k / n,
                dst: k % n,
                weights: self.adj.iter().map(|a| a[k]).collect(),
            })
            .collect()
    }

    /// Applies `perm` (node `i` becomes node `perm[i]`) to features and adjacency.
    pub fn permuted(&self, perm: &[usize]) -> Result<TemporalGraph> {
        let (n, t, d) = (self.nodes(), self.steps(), self.feature_dim());
        if perm.len() != n {
            return Err(Error::shape("permute", &[perm.len()], &[n]));
        }
        let mut x = vec![0.0; n * t * d];
        for (i, &pi) in perm.iter().enumerate() {
            x[pi * t * d..(pi + 1) * t * d].copy_from_slice(&self.x.data()[i * t * d..(i + 1) * t * d]);
        }
        let adj = self
            .adj
            .iter()
            .map(|a| {
                let mut b = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        b[perm[i] * n + perm[j]] = a[i * n + j];
                    }
                }
                b
            })
            .collect();
        TemporalGraph::new(Tensor::new(vec![n, t, d], x)?, adj, self.directed)
    }
}

/// Features with a single adjacency shared by all steps.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticGraph {
    pub x: Tensor,
    pub adj: Vec<f64>,
}

impl StaticGraph {
    pub fn nodes(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let n = self.nodes();
        self.adj
            .iter()
            .enumerate()
            .filter(|(_, &w)| w != 0.0)
            .map(|(k, &w)| (k / n, k % n, w))
            .collect()
    }

    /// The same adjacency repeated at every step.
    pub fn as_temporal(&self) -> Result<TemporalGraph> {
        let t = self.x.shape()[1];
        TemporalGraph::new(self.x.clone(), vec![self.adj.clone(); t], true)
    }
}

/// Returns the z-normalized copy of `x`, or `None` when `x` is numerically constant.
fn z_normalize(x: &[f64]) -> Option<Vec<f64>> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if var <= (1e-12 * scale).powi(2) || var == 0.0 {
        return None;
    }
    let sd = var.sqrt();
    Some(x.iter().map(|v| (v - mean) / sd).collect())
}

fn normalized_dot(a: &Option<Vec<f64>>, b: &Option<Vec<f64>>) -> f64 {
    match (a, b) {
        (Some(a), Some(b)) => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            (dot.abs() / a.len() as f64).min(1.0)
        }
        _ => 0.0,
    }
}

/// Absolute zero-lag normalized cross-correlation of two snapshot features.
pub fn xcorr_weight(xi: &[f64], xj: &[f64]) -> Result<f64> {
    if xi.len() != xj.len() {
        return Err(Error::shape("xcorr_weight", &[xi.len()], &[xj.len()]));
    }
    if xi.len() < 2 {
        return Err(Error::Contract("correlation needs at least 2 features".into()));
    }
    Ok(normalized_dot(&z_normalize(xi), &z_normalize(xj)))
}

/// Keeps, for every step and source node, the `tau` strongest outgoing edges.
pub fn build_dynamic(x: &Tensor, tau: usize) -> Result<TemporalGraph> {
    if x.rank() != 3 {
        return Err(Error::shape("build_dynamic", x.shape(), &[0, 0, 0]));
    }
    let (n, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if tau == 0 || n <= tau {
        return Err(Error::Config(format!("need 1 <= tau < N, got tau={tau}, N={n}")));
    }
    if d < 2 {
        return Err(Error::Contract("correlation needs at least 2 features".into()));
    }
    if !x.is_finite() {
        return Err(Error::Domain { op: "build_dynamic", detail: "non-finite features".into() });
    }
    let data = x.data();
    let mut adj = Vec::with_capacity(t);
    let mut candidates: Vec<(usize, f64)> = Vec::with_capacity(n);
    for step in 0..t {
        let z: Vec<Option<Vec<f64>>> = (0..n)
            .map(|i| z_normalize(&data[(i * t + step) * d..(i * t + step + 1) * d]))
            .collect();
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            candidates.clear();
            candidates.extend((0..n).filter(|&j| j != i).map(|j| (j, normalized_dot(&z[i], &z[j]))));
            candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            for &(j, v) in &candidates[..tau] {
                w[i * n + j] = v;
            }
        }
        adj.push(w);
    }
    TemporalGraph::new(x.clone(), adj, true)
}

/// Temporal mean of the adjacency stack.
pub fn compress_static(tg: &TemporalGraph) -> StaticGraph {
    let n = tg.nodes();
    let steps = tg.steps() as f64;
    let mut adj = vec![0.0; n * n];
    for a in &tg.adj {
        for (acc, w) in adj.iter_mut().zip(a) {
            *acc += w;
        }
    }
    adj.iter_mut().for_each(|w| *w /= steps);
    StaticGraph { x: tg.x.clone(), adj }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExportEdge {
    pub i: usize,
    pub j: usize,
    pub w: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SnapshotExport {
    pub t: usize,
    pub edges: Vec<ExportEdge>,
}

/// Strongest `k` nonzero edges of each `N x N` snapshot, weight descending.
pub fn top_edges(snapshots: &[Vec<f64>], n: usize, k: usize) -> Vec<SnapshotExport> {
    snapshots
        .iter()
        .enumerate()
        .map(|(t, a)| {
            let mut edges: Vec<ExportEdge> = a
                .iter()
                .enumerate()
                .filter(|(_, &w)| w != 0.0)
                .map(|(idx, &w)| ExportEdge { i: idx / n, j: idx % n, w })
                .collect();
            edges.sort_by(|a, b| b.w.total_cmp(&a.w).then((a.i, a.j).cmp(&(b.i, b.j))));
            edges.truncate(k);
            SnapshotExport { t, edges }
        })
        .collect()
}

pub fn export_json(snapshots: &[Vec<f64>], n: usize, k: usize) -> Result<String> {
    Ok(serde_json::to_string_pretty(&top_edges(snapshots, n, k))?)
}
