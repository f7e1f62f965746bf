//! Normalized Laplacians, a Jacobi eigensolver, Laplacian positional
//! encodings, and the GCN propagation and pooling used by every model.

use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{SparsePattern, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_K: usize = 8;
pub const SYMMETRY_TOL: f64 = 1e-10;
pub const OFF_DIAGONAL_TOL: f64 = 1e-12;
pub const DEGENERATE_GAP: f64 = 1e-10;
const SIGN_EPS: f64 = 1e-10;
const MAX_SWEEPS: usize = 100;

static DEGENERATE_WARNED: AtomicBool = AtomicBool::new(false);

/// Eigenpairs sorted ascending; column `k` of `vectors` pairs with `values[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Eigen {
    pub values: Vec<f64>,
    pub vectors: Tensor,
}

impl Eigen {
    pub fn vector(&self, k: usize) -> Vec<f64> {
        let n = self.values.len();
        (0..n).map(|i| self.vectors.at(i, k)).collect()
    }

    /// True when two of the first `k + 1` eigenvalues are closer than [`DEGENERATE_GAP`].
    pub fn degenerate_within(&self, k: usize) -> bool {
        let upto = (k + 1).min(self.values.len());
        self.values[..upto].windows(2).any(|w| (w[1] - w[0]).abs() < DEGENERATE_GAP)
    }
}

fn off_diagonal_norm(a: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[i * n + j] * a[i * n + j];
            }
        }
    }
    s.sqrt()
}

/// Cyclic Jacobi eigendecomposition of a symmetric `n x n` row-major matrix.
pub fn sym_eig(s: &[f64], n: usize) -> Result<Eigen> {
    if s.len() != n * n || n == 0 {
        return Err(Error::shape("sym_eig", &[s.len()], &[n, n]));
    }
    for i in 0..n {
        for j in i + 1..n {
            if (s[i * n + j] - s[j * n + i]).abs() > SYMMETRY_TOL {
                return Err(Error::Contract(format!(
                    "sym_eig input is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain { op: "sym_eig", detail: "non-finite entry".into() });
    }
    let mut a = s.to_vec();
    for i in 0..n {
        for j in i + 1..n {
            let m = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = m;
            a[j * n + i] = m;
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
    let mut sweeps = 0;
    while off_diagonal_norm(&a, n) >= OFF_DIAGONAL_TOL * scale {
        if sweeps == MAX_SWEEPS {
            return Err(Error::Numeric { op: "sym_eig", step: sweeps });
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (a[p * n + p], a[q * n + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - sn * akq;
                    a[k * n + q] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - sn * aqk;
                    a[q * n + k] = sn * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - sn * vkq;
                    v[k * n + q] = sn * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[x * n + x].total_cmp(&a[y * n + y]).then(x.cmp(&y)));
    let values = order.iter().map(|&k| a[k * n + k]).collect();
    let mut vectors = vec![0.0; n * n];
    for (col, &k) in order.iter().enumerate() {
        let flip = (0..n)
            .map(|i| v[i * n + k])
            .find(|x| x.abs() > SIGN_EPS)
            .is_some_and(|x| x < 0.0);
        let sign = if flip { -1.0 } else { 1.0 };
        for i in 0..n {
            vectors[i * n + col] = sign * v[i * n + k];
        }
    }
    Ok(Eigen { values, vectors: Tensor::new(vec![n, n], vectors)? })
}

/// `I - D^{-1/2} (A + I) D^{-1/2}` with self-loops, or without them when `self_loops` is false.
pub fn normalized_laplacian(adj: &[f64], n: usize, self_loops: bool) -> Result<Vec<f64>> {
    if adj.len() != n * n {
        return Err(Error::shape("normalized_laplacian", &[adj.len()], &[n, n]));
    }
    if adj.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::Domain {
            op: "normalized_laplacian",
            detail: "adjacency must be finite and non-negative".into(),
        });
    }
    let mut a = adj.to_vec();
    if self_loops {
        for i in 0..n {
            a[i * n + i] += 1.0;
        }
    }
    let deg: Vec<f64> = (0..n).map(|i| a[i * n..(i + 1) * n].iter().sum()).collect();
    if let Some(i) = deg.iter().position(|&d| d <= 0.0) {
        return Err(Error::Domain {
            op: "normalized_laplacian",
            detail: format!("node {i} has zero degree"),
        });
    }
    let dinv: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let id = if i == j { 1.0 } else { 0.0 };
            l[i * n + j] = id - dinv[i] * a[i * n + j] * dinv[j];
        }
    }
    Ok(l)
}

/// `(M + M^T) / 2` of a directed weighted edge list.
pub fn symmetrize(n: usize, edges: &[(usize, usize, f64)]) -> Vec<f64> {
    let mut a = vec![0.0; n * n];
    for &(i, j, w) in edges {
        a[i * n + j] += 0.5 * w;
        a[j * n + i] += 0.5 * w;
    }
    a
}

/// Node positions from the first `k` Laplacian eigenvectors.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralEncoding {
    pub eigen: Eigen,
    pub k: usize,
    /// Row-major `N x k`.
    pub positions: Vec<f64>,
    pub degenerate: bool,
}

/// Laplacian positional encoding of a symmetric non-negative adjacency.
pub fn lap_pe(sym_adj: &[f64], n: usize, k: usize) -> Result<SpectralEncoding> {
    if k > n {
        return Err(Error::Config(format!("K={k} exceeds N={n}")));
    }
    let l = normalized_laplacian(sym_adj, n, true)?;
    let eigen = sym_eig(&l, n)?;
    let mut positions = vec![0.0; n * k];
    for i in 0..n {
        for c in 0..k {
            positions[i * k + c] = eigen.vectors.at(i, c);
        }
    }
    let degenerate = k > 0 && eigen.degenerate_within(k);
    if degenerate && !DEGENERATE_WARNED.swap(true, Ordering::Relaxed) {
        log::warn!("repeated Laplacian eigenvalue among the first {k}; positions depend on the eigensolver basis");
    }
    Ok(SpectralEncoding { eigen, k, positions, degenerate })
}

/// Directed weighted edges of a block-diagonal batch of graphs over `nodes` rows.
#[derive(Clone, Debug)]
pub struct EdgeList {
    pub nodes: usize,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
}

/// Sparse propagation operator `D^{-1/2} (A' + I) D^{-1/2}` where `A'` is the
/// symmetrized edge list; the coefficients live on the tape.
pub struct Propagation {
    pub pattern: Arc<SparsePattern>,
    pub coef: Var,
}

impl EdgeList {
    pub fn new(nodes: usize, src: Vec<usize>, dst: Vec<usize>) -> Result<Self> {
        if src.len() != dst.len() {
            return Err(Error::Contract("edge endpoint lists differ in length".into()));
        }
        if src.iter().chain(&dst).any(|&v| v >= nodes) {
            return Err(Error::Bounds(format!("edge endpoint outside 0..{nodes}")));
        }
        Ok(EdgeList { nodes, src, dst })
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Entry layout: both directions of every edge, then one self-loop per node.
    fn pattern(&self) -> Result<SparsePattern> {
        let mut rows = Vec::with_capacity(2 * self.len() + self.nodes);
        let mut cols = Vec::with_capacity(rows.capacity());
        rows.extend_from_slice(&self.src);
        rows.extend_from_slice(&self.dst);
        rows.extend(0..self.nodes);
        cols.extend_from_slice(&self.dst);
        cols.extend_from_slice(&self.src);
        cols.extend(0..self.nodes);
        SparsePattern::new(self.nodes, self.nodes, rows, cols)
    }

    /// Builds the normalized operator from per-edge weights (`E x 1` on the tape).
    pub fn propagation(&self, tape: &mut Tape, weights: Var) -> Result<Propagation> {
        if tape.shape(weights) != [self.len(), 1] {
            return Err(Error::shape("propagation", tape.shape(weights), &[self.len(), 1]));
        }
        let pattern = Arc::new(self.pattern()?);
        let half = tape.scale(weights, 0.5)?;
        let loops = tape.constant(Tensor::ones(&[self.nodes, 1]));
        let values = tape.concat_rows(&[half, half, loops])?;
        let rows = Arc::new(pattern.row_idx.clone());
        let cols = Arc::new(pattern.col_idx.clone());
        let deg = tape.scatter_add_rows(values, rows.clone(), self.nodes)?;
        let dinv = tape.powf(deg, -0.5)?;
        let di = tape.gather_rows(dinv, rows)?;
        let dj = tape.gather_rows(dinv, cols)?;
        let coef = tape.mul(values, di)?;
        let coef = tape.mul(coef, dj)?;
        Ok(Propagation { pattern, coef })
    }

    /// Same operator with constant weights.
    pub fn constant_propagation(&self, tape: &mut Tape, weights: &[f64]) -> Result<Propagation> {
        let w = tape.constant(Tensor::new(vec![self.len().max(1), 1], pad(weights))?);
        if self.is_empty() {
            let pattern = Arc::new(self.pattern()?);
            let coef = tape.constant(Tensor::ones(&[self.nodes, 1]));
            return Ok(Propagation { pattern, coef });
        }
        self.propagation(tape, w)
    }
}

fn pad(w: &[f64]) -> Vec<f64> {
    if w.is_empty() {
        vec![0.0]
    } else {
        w.to_vec()
    }
}

/// One GCN layer `S H Θ`, rectified unless `last`.
pub fn gcn_layer(tape: &mut Tape, prop: &Propagation, h: Var, theta: Var, last: bool) -> Result<Var> {
    let ht = tape.matmul(h, theta)?;
    let out = tape.spmm(prop.coef, ht, prop.pattern.clone())?;
    if last {
        Ok(out)
    } else {
        tape.relu(out)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    #[default]
    Max,
    Mean,
    Sum,
    Concat,
}

impl PoolMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PoolMode::Max => "max",
            PoolMode::Mean => "mean",
            PoolMode::Sum => "sum",
            PoolMode::Concat => "concat",
        }
    }

    /// Width of the pooled vector for `nodes` rows of width `h`.
    pub fn width(self, nodes: usize, h: usize) -> usize {
        match self {
            PoolMode::Concat => nodes * h,
            _ => h,
        }
    }
}

impl FromStr for PoolMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(PoolMode::Max),
            "mean" => Ok(PoolMode::Mean),
            "sum" => Ok(PoolMode::Sum),
            "concat" => Ok(PoolMode::Concat),
            other => Err(Error::Config(format!("unknown pooling mode {other:?}"))),
        }
    }
}

/// Pools consecutive blocks of `nodes` rows (one block per graph).
pub fn pool(tape: &mut Tape, h: Var, nodes: usize, mode: PoolMode) -> Result<Var> {
    match mode {
        PoolMode::Max => tape.segment_max(h, nodes),
        PoolMode::Mean => tape.segment_mean(h, nodes),
        PoolMode::Sum => tape.segment_sum(h, nodes),
        PoolMode::Concat => {
            let shape = tape.shape(h).to_vec();
            if shape.len() != 2 || !shape[0].is_multiple_of(nodes) {
                return Err(Error::shape("pool", &shape, &[nodes]));
            }
            tape.reshape(h, &[shape[0] / nodes, nodes * shape[1]])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sym(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = rng.random_range(-1.0..1.0);
                a[i * n + j] = v;
                a[j * n + i] = v;
            }
        }
        a
    }

    fn random_adjacency(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                if rng.random_bool(0.5) {
                    let v = rng.random_range(0.0..2.0);
                    a[i * n + j] = v;
                    a[j * n + i] = v;
                }
            }
        }
        a
    }

    fn dense_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                for j in 0..n {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn residual(s: &[f64], e: &Eigen, n: usize) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..n {
            let u = e.vector(k);
            for i in 0..n {
                let lu: f64 = (0..n).map(|j| s[i * n + j] * u[j]).sum();
                worst = worst.max((lu - e.values[k] * u[i]).abs());
            }
        }
        worst
    }

    fn orthonormality(e: &Eigen, n: usize) -> f64 {
        let mut worst: f64 = 0.0;
        for a in 0..n {
            for b in 0..n {
                let dot: f64 = (0..n).map(|i| e.vectors.at(i, a) * e.vectors.at(i, b)).sum();
                worst = worst.max((dot - if a == b { 1.0 } else { 0.0 }).abs());
            }
        }
        worst
    }

    #[test]
    fn diagonal_matrix_sorts_eigenvalues() {
        let e = sym_eig(&[3.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0], 3).unwrap();
        assert_eq!(e.values, vec![1.0, 2.0, 3.0]);
        assert_eq!(e.vector(0), vec![0.0, 1.0, 0.0]);
        assert_eq!(e.vector(1), vec![0.0, 0.0, 1.0]);
        assert_eq!(e.vector(2), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn swap_matrix_has_plus_minus_one() {
        let e = sym_eig(&[0.0, 1.0, 1.0, 0.0], 2).unwrap();
        assert!((e.values[0] + 1.0).abs() < 1e-15 && (e.values[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn random_matrix_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 6;
        let s = random_sym(&mut rng, n);
        let e = sym_eig(&s, n).unwrap();
        let mut err = 0.0;
        for i in 0..n {
            for j in 0..n {
                let r: f64 = (0..n).map(|k| e.vectors.at(i, k) * e.values[k] * e.vectors.at(j, k)).sum();
                err += (r - s[i * n + j]).powi(2);
            }
        }
        assert!(err.sqrt() < 1e-10, "{}", err.sqrt());
    }

    #[test]
    fn asymmetric_input_is_rejected() {
        assert!(matches!(sym_eig(&[0.0, 1.0, 0.5, 0.0], 2), Err(Error::Contract(_))));
    }

    #[test]
    fn two_node_laplacian_by_hand() {
        // A + I = [[1,1],[1,1]], degrees 2, L = I - (A+I)/2
        let l = normalized_laplacian(&[0.0, 1.0, 1.0, 0.0], 2, true).unwrap();
        for (a, b) in l.iter().zip([0.5, -0.5, -0.5, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(normalized_laplacian(&[0.0, 0.0, 0.0, 0.0], 2, false).is_err());
    }

    #[test]
    fn path_graph_first_position_is_kernel_direction() {
        let a = vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let pe = lap_pe(&a, 3, 1).unwrap();
        let sq: Vec<f64> = [2.0f64, 3.0, 2.0].iter().map(|d| d.sqrt()).collect();
        let norm = sq.iter().map(|v| v * v).sum::<f64>().sqrt();
        for i in 0..3 {
            assert!((pe.positions[i] - sq[i] / norm).abs() < 1e-12);
        }
        assert!(pe.eigen.values[0].abs() < 1e-12);
    }

    #[test]
    fn four_cycle_second_vector_matches_power_iteration() {
        // distinct weights keep the spectrum simple
        let n = 4;
        let mut a = vec![0.0; n * n];
        for (i, w) in [(0usize, 1.0), (1, 2.0), (2, 0.5), (3, 1.5)] {
            let j = (i + 1) % n;
            a[i * n + j] = w;
            a[j * n + i] = w;
        }
        let pe = lap_pe(&a, n, 2).unwrap();
        let l = normalized_laplacian(&a, n, true).unwrap();
        // power iteration on 2I - L deflated against the kernel vector
        let kernel = pe.eigen.vector(0);
        let mut v: Vec<f64> = vec![0.3, -0.1, 0.7, 0.2];
        let mut shifted = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                shifted[i * n + j] = if i == j { 2.0 } else { 0.0 } - l[i * n + j];
            }
        }
        for _ in 0..5000 {
            let dot: f64 = v.iter().zip(&kernel).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(&kernel).for_each(|(x, k)| *x -= dot * k);
            v = dense_matmul(&shifted, &v, n, n, 1);
            let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= nv);
        }
        // the largest eigenvalue of 2I - L in the complement pairs with the second smallest of L
        let first = v.iter().copied().find(|x| x.abs() > 1e-10).unwrap();
        if first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for i in 0..n {
            assert!((pe.positions[i * 2 + 1] - v[i]).abs() < 1e-8, "{:?} vs {v:?}", pe.positions);
        }
    }

    #[test]
    fn k_larger_than_n_is_config_error() {
        assert!(matches!(lap_pe(&[0.0; 4], 2, 3), Err(Error::Config(_))));
        assert!(lap_pe(&[0.0; 4], 2, 0).unwrap().positions.is_empty());
    }

    fn run_gcn(n: usize, edges: &[(usize, usize, f64)], h: &Tensor, theta: &Tensor, last: bool) -> Tensor {
        let list = EdgeList::new(n, edges.iter().map(|e| e.0).collect(), edges.iter().map(|e| e.1).collect()).unwrap();
        let w: Vec<f64> = edges.iter().map(|e| e.2).collect();
        let mut tape = Tape::new();
        let prop = list.constant_propagation(&mut tape, &w).unwrap();
        let hv = tape.constant(h.clone());
        let tv = tape.constant(theta.clone());
        let out = gcn_layer(&mut tape, &prop, hv, tv, last).unwrap();
        tape.value(out).clone()
    }

    /// Dense `D^{-1/2}(A'+I)D^{-1/2} H Θ` written from the definition.
    fn dense_gcn(n: usize, edges: &[(usize, usize, f64)], h: &Tensor, theta: &Tensor) -> Vec<f64> {
        let mut a = symmetrize(n, edges);
        for i in 0..n {
            a[i * n + i] += 1.0;
        }
        let deg: Vec<f64> = (0..n).map(|i| a[i * n..(i + 1) * n].iter().sum()).collect();
        let mut s = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                s[i * n + j] = a[i * n + j] / (deg[i] * deg[j]).sqrt();
            }
        }
        let (d, o) = (h.cols(), theta.cols());
        let sh = dense_matmul(&s, h.data(), n, n, d);
        dense_matmul(&sh, theta.data(), n, d, o)
    }

    #[test]
    fn single_node_identity_layer_is_identity() {
        let h = Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap();
        let out = run_gcn(1, &[], &h, &Tensor::eye(3), true);
        assert_eq!(out, h);
        let out = run_gcn(1, &[], &h, &Tensor::eye(3), false);
        assert_eq!(out.data(), &[1.0, 0.0, 0.5]);
    }

    #[test]
    fn path_graph_matches_dense_oracle() {
        let edges = [(0, 1, 1.0), (1, 2, 1.0), (1, 0, 1.0), (2, 1, 1.0)];
        let h = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 2.0, -1.0]).unwrap();
        let theta = Tensor::matrix(2, 2, vec![0.5, 1.0, -1.0, 0.25]).unwrap();
        let got = run_gcn(3, &edges, &h, &theta, true);
        let want = dense_gcn(3, &edges, &h, &theta);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn regular_graph_keeps_identical_rows_identical() {
        let n = 5;
        let edges: Vec<(usize, usize, f64)> = (0..n).flat_map(|i| [(i, (i + 1) % n, 1.0), ((i + 1) % n, i, 1.0)]).collect();
        let h = Tensor::from_rows(&vec![vec![0.3, -0.7]; n]).unwrap();
        let theta = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = run_gcn(n, &edges, &h, &theta, true);
        for i in 1..n {
            assert!((out.row(i)[0] - out.row(0)[0]).abs() < 1e-14);
            assert!((out.row(i)[1] - out.row(0)[1]).abs() < 1e-14);
        }
    }

    #[test]
    fn pooling_modes() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::matrix(2, 2, vec![1.0, 5.0, 3.0, 2.0]).unwrap());
        let m = pool(&mut tape, h, 2, PoolMode::Max).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0, 5.0]);
        let s = pool(&mut tape, h, 2, PoolMode::Sum).unwrap();
        let a = pool(&mut tape, h, 2, PoolMode::Mean).unwrap();
        for (x, y) in tape.value(s).data().iter().zip(tape.value(a).data()) {
            assert!((x - 2.0 * y).abs() < 1e-12);
        }
        let c = pool(&mut tape, h, 2, PoolMode::Concat).unwrap();
        assert_eq!(tape.value(c).shape(), &[1, 4]);
        let one = pool(&mut tape, h, 1, PoolMode::Max).unwrap();
        assert_eq!(tape.value(one), tape.value(h));
        assert!(matches!("median".parse::<PoolMode>(), Err(Error::Config(_))));
    }

    #[test]
    fn spectral_suite_on_random_adjacencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let n = rng.random_range(1..=12);
            let a = random_adjacency(&mut rng, n);
            let l = normalized_laplacian(&a, n, true).unwrap();
            let e = sym_eig(&l, n).unwrap();
            assert!(e.values.iter().all(|&v| (-1e-9..=2.0 + 1e-9).contains(&v)));
            assert!(residual(&l, &e, n) < 1e-8);
            assert!(orthonormality(&e, n) < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn gcn_is_permutation_covariant(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 5;
            let mut edges = Vec::new();
            for i in 0..n {
                for j in 0..n {
                    if i != j && rng.random_bool(0.4) {
                        edges.push((i, j, rng.random_range(0.1..1.0)));
                    }
                }
            }
            let h = Tensor::new(vec![n, 3], (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let theta = Tensor::new(vec![3, 2], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            for k in (1..n).rev() {
                perm.swap(k, rng.random_range(0..=k));
            }
            let pedges: Vec<_> = edges.iter().map(|&(i, j, w)| (perm[i], perm[j], w)).collect();
            let mut ph = vec![0.0; n * 3];
            for i in 0..n {
                ph[perm[i] * 3..perm[i] * 3 + 3].copy_from_slice(h.row(i));
            }
            let ph = Tensor::new(vec![n, 3], ph).unwrap();
            let base = run_gcn(n, &edges, &h, &theta, false);
            let moved = run_gcn(n, &pedges, &ph, &theta, false);
            for i in 0..n {
                for c in 0..2 {
                    prop_assert!((moved.at(perm[i], c) - base.at(i, c)).abs() < 1e-12);
                }
            }

            let mut tape = Tape::new();
            let hv = tape.constant(h.clone());
            let pv = tape.constant(ph.clone());
            for mode in [PoolMode::Max, PoolMode::Mean, PoolMode::Sum] {
                let a = pool(&mut tape, hv, n, mode).unwrap();
                let b = pool(&mut tape, pv, n, mode).unwrap();
                prop_assert!(tape.value(a).max_abs_diff(tape.value(b)) < 1e-12);
            }
            let a = pool(&mut tape, hv, n, PoolMode::Concat).unwrap();
            let b = pool(&mut tape, pv, n, PoolMode::Concat).unwrap();
            if perm.iter().enumerate().any(|(i, &p)| i != p) {
                prop_assert!(tape.value(a) != tape.value(b));
            }
        }

        #[test]
        fn kernel_vector_is_sqrt_degree(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(2..=12);
            let mut a = random_adjacency(&mut rng, n);
            // a spanning path keeps the graph connected
            for i in 0..n - 1 {
                if a[i * n + i + 1] == 0.0 {
                    a[i * n + i + 1] = 0.5;
                    a[(i + 1) * n + i] = 0.5;
                }
            }
            let pe = lap_pe(&a, n, 1).unwrap();
            let deg: Vec<f64> = (0..n).map(|i| 1.0 + a[i * n..(i + 1) * n].iter().sum::<f64>()).collect();
            let norm = deg.iter().sum::<f64>().sqrt();
            for i in 0..n {
                prop_assert!((pe.positions[i] - deg[i].sqrt() / norm).abs() < 1e-8);
            }
        }
    }
}
