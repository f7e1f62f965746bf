//! Append-only reverse-mode tape.
//!
//! Every forward operation pushes one node holding its value. `backward`
//! walks the nodes in reverse insertion order, which is a valid reverse
//! topological order because parents are always pushed before children.

use std::sync::Arc;

use crate::autodiff::param::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Coordinate pattern of a sparse `rows x cols` matrix whose values live on the tape.
///
/// Duplicate coordinates are allowed and sum.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsePattern {
    pub rows: usize,
    pub cols: usize,
    pub row_idx: Vec<usize>,
    pub col_idx: Vec<usize>,
}

impl SparsePattern {
    pub fn new(rows: usize, cols: usize, row_idx: Vec<usize>, col_idx: Vec<usize>) -> Result<Self> {
        if row_idx.len() != col_idx.len() {
            return Err(Error::Contract("sparse pattern index lengths differ".into()));
        }
        if row_idx.iter().any(|&r| r >= rows) || col_idx.iter().any(|&c| c >= cols) {
            return Err(Error::Bounds("sparse pattern index out of range".into()));
        }
        Ok(SparsePattern {
            rows,
            cols,
            row_idx,
            col_idx,
        })
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }
}

#[derive(Clone, Debug)]
pub enum OpKind {
    Constant,
    Param(ParamId),
    MatMul,
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    Scale(f64),
    Shift(f64),
    Relu,
    Sigmoid,
    Softplus,
    Tanh,
    Exp,
    Log,
    Powf(f64),
    Clamp { lo: f64, hi: f64 },
    Sum,
    Mean,
    /// Max over all elements; the argmax is kept for the backward pass.
    Max,
    ConcatCols,
    ConcatRows,
    SliceRows { start: usize, end: usize },
    SliceCols { start: usize, end: usize },
    Transpose,
    Reshape(Vec<usize>),
    /// `M x h` plus a `1 x h` row repeated over all rows.
    AddRowBias,
    /// `M x h` times an `M x 1` column, row by row.
    ScaleRows,
    GatherRows(Arc<Vec<usize>>),
    ScatterAddRows { index: Arc<Vec<usize>>, rows: usize },
    /// Sparse values (`nnz x 1`) times dense rows.
    SpMM(Arc<SparsePattern>),
    SegmentSum { segment: usize },
    SegmentMean { segment: usize },
    SegmentMax { segment: usize },
    /// `H_t = F_t * H_{t-1} + U_t` over time-major blocks of rows.
    LinearRecurrence { steps: usize },
    /// Selective SSM over time-major blocks. Inputs: projections
    /// `R x (1+3h)` laid out `[Δ | B | C | E]`, log decay `1 x h`, initial
    /// state `M x h`. Output `R x 2h` holds `[Y | H]`.
    SsmScan { steps: usize },
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Constant => "constant",
            OpKind::Param(_) => "param",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::Shift(_) => "shift",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softplus => "softplus",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Powf(_) => "powf",
            OpKind::Clamp { .. } => "clamp",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Max => "max",
            OpKind::ConcatCols => "concat_cols",
            OpKind::ConcatRows => "concat_rows",
            OpKind::SliceRows { .. } => "slice_rows",
            OpKind::SliceCols { .. } => "slice_cols",
            OpKind::Transpose => "transpose",
            OpKind::Reshape(_) => "reshape",
            OpKind::AddRowBias => "add_row_bias",
            OpKind::ScaleRows => "scale_rows",
            OpKind::GatherRows(_) => "gather_rows",
            OpKind::ScatterAddRows { .. } => "scatter_add_rows",
            OpKind::SpMM(_) => "spmm",
            OpKind::SegmentSum { .. } => "segment_sum",
            OpKind::SegmentMean { .. } => "segment_mean",
            OpKind::SegmentMax { .. } => "segment_max",
            OpKind::LinearRecurrence { .. } => "linear_recurrence",
            OpKind::SsmScan { .. } => "ssm_scan",
        }
    }
}

struct Node {
    kind: OpKind,
    parents: Vec<usize>,
    value: Tensor,
    argmax: Vec<usize>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    params: Vec<Option<Var>>,
}

impl Gradients {
    /// Adjoint of any node, `None` when the root does not depend on it.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.adjoints.get(var.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .get(id)
            .copied()
            .flatten()
            .and_then(|v| self.wrt(v))
    }

    /// One gradient per parameter in `store`; zero where unreachable.
    pub fn into_param_grads(mut self, store: &ParamStore) -> Vec<Tensor> {
        store
            .iter()
            .enumerate()
            .map(|(id, p)| {
                self.params
                    .get(id)
                    .copied()
                    .flatten()
                    .and_then(|v| self.adjoints[v.0].take())
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
            })
            .collect()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::shape(op, t.shape(), &[]));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

pub(crate) fn softplus(x: f64) -> f64 {
    (-x.abs()).exp().ln_1p() + x.max(0.0)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, kind: OpKind, parents: Vec<usize>, value: Tensor, argmax: Vec<usize>) -> Var {
        let requires_grad = match kind {
            OpKind::Constant => false,
            OpKind::Param(_) => true,
            _ => parents.iter().any(|&p| self.nodes[p].requires_grad),
        };
        self.nodes.push(Node {
            kind,
            parents,
            value,
            argmax,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(OpKind::Constant, Vec::new(), value, Vec::new())
    }

    /// Loads a parameter leaf. Repeated calls for the same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_vars.get(id) {
            return *v;
        }
        let p = store.get(id);
        let kind = if p.trainable {
            OpKind::Param(id)
        } else {
            OpKind::Constant
        };
        let v = self.push(kind, Vec::new(), p.value.clone(), Vec::new());
        if self.param_vars.len() <= id {
            self.param_vars.resize(id + 1, None);
        }
        self.param_vars[id] = Some(v);
        v
    }

    /// Records one operation. Input count and shapes must conform to `kind`.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            OpKind::Constant | OpKind::Param(_) => {
                return Err(Error::Contract("leaves are created with constant()/param()".into()))
            }
            OpKind::MatMul
            | OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::AddRowBias
            | OpKind::ScaleRows
            | OpKind::SpMM(_) => Some(2),
            OpKind::LinearRecurrence { .. } | OpKind::SsmScan { .. } => Some(3),
            OpKind::ConcatCols | OpKind::ConcatRows => None,
            _ => Some(1),
        };
        match arity {
            Some(n) if inputs.len() != n => {
                return Err(Error::Contract(format!(
                    "{} takes {n} inputs, got {}",
                    kind.name(),
                    inputs.len()
                )))
            }
            None if inputs.is_empty() => {
                return Err(Error::Contract(format!("{} needs inputs", kind.name())))
            }
            _ => {}
        }
        let (value, argmax) = self.eval(&kind, inputs)?;
        let parents = inputs.iter().map(|v| v.0).collect();
        Ok(self.push(kind, parents, value, argmax))
    }

    fn eval(&self, kind: &OpKind, inputs: &[Var]) -> Result<(Tensor, Vec<usize>)> {
        let x = |i: usize| &self.nodes[inputs[i].0].value;
        let none = Vec::new;
        let out = match kind {
            OpKind::Constant | OpKind::Param(_) => unreachable!(),
            OpKind::MatMul => (x(0).matmul(x(1))?, none()),
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                let (a, b) = (x(0), x(1));
                let f: fn(f64, f64) -> f64 = match kind {
                    OpKind::Add => |p, q| p + q,
                    OpKind::Sub => |p, q| p - q,
                    _ => |p, q| p * q,
                };
                let t = if a.shape() == b.shape() {
                    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
                    Tensor::from_parts(a.shape().to_vec(), data)
                } else if b.is_scalar() {
                    let q = b.item();
                    a.map(|p| f(p, q))
                } else if a.is_scalar() {
                    let p = a.item();
                    b.map(|q| f(p, q))
                } else {
                    return Err(Error::shape(kind.name(), a.shape(), b.shape()));
                };
                (t, none())
            }
            OpKind::Scale(s) => (x(0).map(|v| v * s), none()),
            OpKind::Shift(s) => (x(0).map(|v| v + s), none()),
            OpKind::Relu => (x(0).map(|v| v.max(0.0)), none()),
            OpKind::Sigmoid => (x(0).map(sigmoid), none()),
            OpKind::Softplus => (x(0).map(softplus), none()),
            OpKind::Tanh => (x(0).map(f64::tanh), none()),
            OpKind::Exp => (x(0).map(f64::exp), none()),
            OpKind::Log => {
                if let Some(bad) = x(0).data().iter().find(|&&v| !(v > 0.0)) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("argument {bad} is not positive"),
                    });
                }
                (x(0).map(f64::ln), none())
            }
            OpKind::Powf(p) => {
                if p.fract() != 0.0 && x(0).data().iter().any(|&v| v < 0.0) {
                    return Err(Error::Domain {
                        op: "powf",
                        detail: "fractional power of a negative value".into(),
                    });
                }
                (x(0).map(|v| v.powf(*p)), none())
            }
            OpKind::Clamp { lo, hi } => (x(0).map(|v| v.clamp(*lo, *hi)), none()),
            OpKind::Sum => (Tensor::scalar(x(0).data().iter().sum()), none()),
            OpKind::Mean => {
                let t = x(0);
                (Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64), none())
            }
            OpKind::Max => {
                let t = x(0);
                let (idx, &m) = t
                    .data()
                    .iter()
                    .enumerate()
                    .fold((0, &f64::NEG_INFINITY), |best, cur| if *cur.1 > *best.1 { cur } else { best });
                (Tensor::scalar(m), vec![idx])
            }
            OpKind::ConcatCols => {
                let rows = matrix_dims("concat_cols", x(0))?.0;
                let mut widths = Vec::with_capacity(inputs.len());
                for i in 0..inputs.len() {
                    let (r, c) = matrix_dims("concat_cols", x(i))?;
                    if r != rows {
                        return Err(Error::shape("concat_cols", x(0).shape(), x(i).shape()));
                    }
                    widths.push(c);
                }
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for i in 0..inputs.len() {
                        data.extend_from_slice(x(i).row(r));
                    }
                }
                (Tensor::from_parts(vec![rows, total], data), none())
            }
            OpKind::ConcatRows => {
                let cols = matrix_dims("concat_rows", x(0))?.1;
                let mut rows = 0;
                let mut data = Vec::new();
                for i in 0..inputs.len() {
                    let (r, c) = matrix_dims("concat_rows", x(i))?;
                    if c != cols {
                        return Err(Error::shape("concat_rows", x(0).shape(), x(i).shape()));
                    }
                    rows += r;
                    data.extend_from_slice(x(i).data());
                }
                (Tensor::from_parts(vec![rows, cols], data), none())
            }
            OpKind::SliceRows { start, end } => {
                let (r, c) = matrix_dims("slice_rows", x(0))?;
                if start >= end || *end > r {
                    return Err(Error::Bounds(format!("rows {start}..{end} of {r}")));
                }
                let data = x(0).data()[start * c..end * c].to_vec();
                (Tensor::from_parts(vec![end - start, c], data), none())
            }
            OpKind::SliceCols { start, end } => {
                let (r, c) = matrix_dims("slice_cols", x(0))?;
                if start >= end || *end > c {
                    return Err(Error::Bounds(format!("cols {start}..{end} of {c}")));
                }
                let t = x(0);
                let mut data = Vec::with_capacity(r * (end - start));
                for i in 0..r {
                    data.extend_from_slice(&t.row(i)[*start..*end]);
                }
                (Tensor::from_parts(vec![r, end - start], data), none())
            }
            OpKind::Transpose => (x(0).transpose()?, none()),
            OpKind::Reshape(shape) => {
                let n: usize = shape.iter().product();
                if n != x(0).len() {
                    return Err(Error::shape("reshape", x(0).shape(), shape));
                }
                (Tensor::new(shape.clone(), x(0).data().to_vec())?, none())
            }
            OpKind::AddRowBias => {
                let (r, c) = matrix_dims("add_row_bias", x(0))?;
                let b = x(1);
                if b.shape() != [1, c] {
                    return Err(Error::shape("add_row_bias", x(0).shape(), b.shape()));
                }
                let mut data = x(0).data().to_vec();
                for row in data.chunks_exact_mut(c) {
                    for (v, bb) in row.iter_mut().zip(b.data()) {
                        *v += bb;
                    }
                }
                (Tensor::from_parts(vec![r, c], data), none())
            }
            OpKind::ScaleRows => {
                let (r, c) = matrix_dims("scale_rows", x(0))?;
                let s = x(1);
                if s.shape() != [r, 1] {
                    return Err(Error::shape("scale_rows", x(0).shape(), s.shape()));
                }
                let mut data = x(0).data().to_vec();
                for (row, &k) in data.chunks_exact_mut(c).zip(s.data()) {
                    row.iter_mut().for_each(|v| *v *= k);
                }
                (Tensor::from_parts(vec![r, c], data), none())
            }
            OpKind::GatherRows(index) => {
                let (r, c) = matrix_dims("gather_rows", x(0))?;
                if index.is_empty() {
                    return Err(Error::Contract("gather with empty index".into()));
                }
                let t = x(0);
                let mut data = Vec::with_capacity(index.len() * c);
                for &i in index.iter() {
                    if i >= r {
                        return Err(Error::Bounds(format!("gather row {i} of {r}")));
                    }
                    data.extend_from_slice(t.row(i));
                }
                (Tensor::from_parts(vec![index.len(), c], data), none())
            }
            OpKind::ScatterAddRows { index, rows } => {
                let (r, c) = matrix_dims("scatter_add_rows", x(0))?;
                if index.len() != r {
                    return Err(Error::shape("scatter_add_rows", x(0).shape(), &[index.len()]));
                }
                let t = x(0);
                let mut data = vec![0.0; rows * c];
                for (src, &dst) in index.iter().enumerate() {
                    if dst >= *rows {
                        return Err(Error::Bounds(format!("scatter row {dst} of {rows}")));
                    }
                    for (o, v) in data[dst * c..(dst + 1) * c].iter_mut().zip(t.row(src)) {
                        *o += v;
                    }
                }
                (Tensor::from_parts(vec![*rows, c], data), none())
            }
            OpKind::SpMM(pattern) => {
                let (vals, dense) = (x(0), x(1));
                let (dr, c) = matrix_dims("spmm", dense)?;
                if vals.len() != pattern.nnz() || dr != pattern.cols {
                    return Err(Error::shape("spmm", vals.shape(), dense.shape()));
                }
                let mut data = vec![0.0; pattern.rows * c];
                for (e, &w) in vals.data().iter().enumerate() {
                    let (r, s) = (pattern.row_idx[e], pattern.col_idx[e]);
                    for (o, v) in data[r * c..(r + 1) * c].iter_mut().zip(dense.row(s)) {
                        *o += w * v;
                    }
                }
                (Tensor::from_parts(vec![pattern.rows, c], data), none())
            }
            OpKind::SegmentSum { segment } | OpKind::SegmentMean { segment } | OpKind::SegmentMax { segment } => {
                let (r, c) = matrix_dims(kind.name(), x(0))?;
                if *segment == 0 || r % segment != 0 {
                    return Err(Error::shape(kind.name(), x(0).shape(), &[*segment]));
                }
                let groups = r / segment;
                let t = x(0);
                let mut data = vec![0.0; groups * c];
                let mut argmax = Vec::new();
                match kind {
                    OpKind::SegmentMax { .. } => {
                        argmax = vec![0; groups * c];
                        for g in 0..groups {
                            for j in 0..c {
                                let mut best = g * segment;
                                for i in g * segment + 1..(g + 1) * segment {
                                    if t.at(i, j) > t.at(best, j) {
                                        best = i;
                                    }
                                }
                                data[g * c + j] = t.at(best, j);
                                argmax[g * c + j] = best;
                            }
                        }
                    }
                    _ => {
                        for i in 0..r {
                            let g = i / segment;
                            for (o, v) in data[g * c..(g + 1) * c].iter_mut().zip(t.row(i)) {
                                *o += v;
                            }
                        }
                        if let OpKind::SegmentMean { .. } = kind {
                            let inv = *segment as f64;
                            data.iter_mut().for_each(|v| *v /= inv);
                        }
                    }
                }
                (Tensor::from_parts(vec![groups, c], data), argmax)
            }
            OpKind::LinearRecurrence { steps } => {
                let (decay, input, init) = (x(0), x(1), x(2));
                same_shape("linear_recurrence", decay, input)?;
                let (r, c) = matrix_dims("linear_recurrence", decay)?;
                if *steps == 0 || r % steps != 0 || init.shape() != [r / steps, c] {
                    return Err(Error::shape("linear_recurrence", decay.shape(), init.shape()));
                }
                let block = r / steps * c;
                let mut data = vec![0.0; r * c];
                let (f, u) = (decay.data(), input.data());
                for t in 0..*steps {
                    let cur = t * block;
                    for k in 0..block {
                        let prev = if t == 0 { init.data()[k] } else { data[cur - block + k] };
                        data[cur + k] = f[cur + k] * prev + u[cur + k];
                    }
                }
                (Tensor::from_parts(vec![r, c], data), none())
            }
            OpKind::SsmScan { steps } => {
                let (proj, log_decay, init) = (x(0), x(1), x(2));
                let (r, width) = matrix_dims("ssm_scan", proj)?;
                let h = log_decay.len();
                if width != 1 + 3 * h
                    || log_decay.shape() != [1, h]
                    || *steps == 0
                    || r % steps != 0
                    || init.shape() != [r / steps, h]
                {
                    return Err(Error::shape("ssm_scan", proj.shape(), init.shape()));
                }
                let m = r / steps;
                let decay: Vec<f64> = log_decay.data().iter().map(|v| v.exp()).collect();
                let p = proj.data();
                let mut data = vec![0.0; r * 2 * h];
                for row in 0..r {
                    let pr = &p[row * width..(row + 1) * width];
                    let delta = softplus(pr[0]);
                    for k in 0..h {
                        let prev = if row < m { init.data()[row * h + k] } else { data[(row - m) * 2 * h + h + k] };
                        let retain = -(delta * decay[k]).clamp(0.0, 1.0) + 1.0;
                        let update = pr[1 + k] * pr[1 + 2 * h + k] * delta;
                        let state = retain * prev + update;
                        data[row * 2 * h + k] = pr[1 + h + k] * state;
                        data[row * 2 * h + h + k] = state;
                    }
                }
                (Tensor::from_parts(vec![r, 2 * h], data), none())
            }
        };
        Ok(out)
    }

    /// Reverse pass from a rank-0 root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = &self.nodes[root.0].value;
        if !root_value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = Vec::with_capacity(root.0 + 1);
        adj.resize_with(root.0 + 1, || None);
        adj[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || node.parents.is_empty() {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(node, &g, &mut adj);
            adj[idx] = Some(g);
        }
        Ok(Gradients {
            adjoints: adj,
            params: self.param_vars.clone(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let p = &node.parents;
        let val = |i: usize| &self.nodes[p[i]].value;
        let needs = |i: usize| self.nodes[p[i]].requires_grad;
        let out = &node.value;

        // Elementwise unary rules: d parent = g * f'(x, y).
        let unary = |adj: &mut [Option<Tensor>], d: &dyn Fn(f64, f64) -> f64| {
            if !needs(0) {
                return;
            }
            let x = val(0);
            let slot = slot(adj, p[0], x.shape());
            for (((s, &gv), &xv), &yv) in slot.data_mut().iter_mut().zip(g.data()).zip(x.data()).zip(out.data()) {
                *s += gv * d(xv, yv);
            }
        };

        match &node.kind {
            OpKind::Constant | OpKind::Param(_) => {}
            OpKind::MatMul => {
                let (a, b) = (val(0), val(1));
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if needs(0) {
                    let s = slot(adj, p[0], a.shape());
                    gemm(m, n, k, g.data(), false, b.data(), true, s.data_mut(), true);
                }
                if needs(1) {
                    let s = slot(adj, p[1], b.shape());
                    gemm(k, m, n, a.data(), true, g.data(), false, s.data_mut(), true);
                }
            }
            OpKind::Add | OpKind::Sub | OpKind::Mul => {
                let (a, b) = (val(0), val(1));
                for side in 0..2 {
                    if !needs(side) {
                        continue;
                    }
                    let target = if side == 0 { a } else { b };
                    let other = if side == 0 { b } else { a };
                    // d/d(side) of the elementwise op, given both operand values
                    let local = |av: f64, bv: f64| -> f64 {
                        match (&node.kind, side) {
                            (OpKind::Add, _) => 1.0,
                            (OpKind::Sub, 0) => 1.0,
                            (OpKind::Sub, _) => -1.0,
                            (_, 0) => bv,
                            _ => av,
                        }
                    };
                    let pick = |t: &Tensor, i: usize| if t.is_scalar() { t.item() } else { t.data()[i] };
                    let s = slot(adj, p[side], target.shape());
                    if target.is_scalar() && !other.is_scalar() {
                        let mut acc = 0.0;
                        for (i, &gv) in g.data().iter().enumerate() {
                            acc += gv * local(pick(a, i), pick(b, i));
                        }
                        s.data_mut()[0] += acc;
                    } else {
                        for (i, (sv, &gv)) in s.data_mut().iter_mut().zip(g.data()).enumerate() {
                            *sv += gv * local(pick(a, i), pick(b, i));
                        }
                    }
                }
            }
            OpKind::Scale(k) => unary(adj, &|_, _| *k),
            OpKind::Shift(_) => unary(adj, &|_, _| 1.0),
            OpKind::Relu => unary(adj, &|x, _| if x > 0.0 { 1.0 } else { 0.0 }),
            OpKind::Sigmoid => unary(adj, &|_, y| y * (1.0 - y)),
            OpKind::Softplus => unary(adj, &|x, _| sigmoid(x)),
            OpKind::Tanh => unary(adj, &|_, y| 1.0 - y * y),
            OpKind::Exp => unary(adj, &|_, y| y),
            OpKind::Log => unary(adj, &|x, _| 1.0 / x),
            OpKind::Powf(e) => unary(adj, &|x, _| e * x.powf(e - 1.0)),
            OpKind::Clamp { lo, hi } => unary(adj, &|x, _| if x >= *lo && x <= *hi { 1.0 } else { 0.0 }),
            OpKind::Sum | OpKind::Mean => {
                if needs(0) {
                    let x = val(0);
                    let scale = if matches!(node.kind, OpKind::Mean) { 1.0 / x.len() as f64 } else { 1.0 };
                    let gv = g.item() * scale;
                    slot(adj, p[0], x.shape()).data_mut().iter_mut().for_each(|s| *s += gv);
                }
            }
            OpKind::Max => {
                if needs(0) {
                    let x = val(0);
                    slot(adj, p[0], x.shape()).data_mut()[node.argmax[0]] += g.item();
                }
            }
            OpKind::ConcatCols => {
                let rows = out.shape()[0];
                let total = out.shape()[1];
                let mut offset = 0;
                for i in 0..p.len() {
                    let x = val(i);
                    let c = x.shape()[1];
                    if needs(i) {
                        let s = slot(adj, p[i], x.shape());
                        for r in 0..rows {
                            let src = &g.data()[r * total + offset..r * total + offset + c];
                            for (sv, gv) in s.data_mut()[r * c..(r + 1) * c].iter_mut().zip(src) {
                                *sv += gv;
                            }
                        }
                    }
                    offset += c;
                }
            }
            OpKind::ConcatRows => {
                let mut offset = 0;
                for i in 0..p.len() {
                    let x = val(i);
                    let n = x.len();
                    if needs(i) {
                        let s = slot(adj, p[i], x.shape());
                        for (sv, gv) in s.data_mut().iter_mut().zip(&g.data()[offset..offset + n]) {
                            *sv += gv;
                        }
                    }
                    offset += n;
                }
            }
            OpKind::SliceRows { start, .. } => {
                if needs(0) {
                    let x = val(0);
                    let c = x.shape()[1];
                    let s = slot(adj, p[0], x.shape());
                    for (sv, gv) in s.data_mut()[start * c..start * c + g.len()].iter_mut().zip(g.data()) {
                        *sv += gv;
                    }
                }
            }
            OpKind::SliceCols { start, end } => {
                if needs(0) {
                    let x = val(0);
                    let c = x.shape()[1];
                    let w = end - start;
                    let s = slot(adj, p[0], x.shape());
                    for (r, grow) in g.data().chunks_exact(w).enumerate() {
                        for (sv, gv) in s.data_mut()[r * c + start..r * c + end].iter_mut().zip(grow) {
                            *sv += gv;
                        }
                    }
                }
            }
            OpKind::Transpose => {
                if needs(0) {
                    let gt = g.transpose().expect("rank-2 adjoint");
                    slot(adj, p[0], val(0).shape()).add_assign(&gt);
                }
            }
            OpKind::Reshape(_) => {
                if needs(0) {
                    let s = slot(adj, p[0], val(0).shape());
                    for (sv, gv) in s.data_mut().iter_mut().zip(g.data()) {
                        *sv += gv;
                    }
                }
            }
            OpKind::AddRowBias => {
                let c = out.shape()[1];
                if needs(0) {
                    slot(adj, p[0], val(0).shape()).add_assign(g);
                }
                if needs(1) {
                    let s = slot(adj, p[1], val(1).shape());
                    for grow in g.data().chunks_exact(c) {
                        for (sv, gv) in s.data_mut().iter_mut().zip(grow) {
                            *sv += gv;
                        }
                    }
                }
            }
            OpKind::ScaleRows => {
                let (x, k) = (val(0), val(1));
                let c = x.shape()[1];
                if needs(0) {
                    let s = slot(adj, p[0], x.shape());
                    for ((srow, grow), &kv) in s.data_mut().chunks_exact_mut(c).zip(g.data().chunks_exact(c)).zip(k.data()) {
                        for (sv, gv) in srow.iter_mut().zip(grow) {
                            *sv += gv * kv;
                        }
                    }
                }
                if needs(1) {
                    let s = slot(adj, p[1], k.shape());
                    for ((sv, grow), xrow) in s.data_mut().iter_mut().zip(g.data().chunks_exact(c)).zip(x.data().chunks_exact(c)) {
                        *sv += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            OpKind::GatherRows(index) => {
                if needs(0) {
                    let x = val(0);
                    let c = x.shape()[1];
                    let s = slot(adj, p[0], x.shape());
                    for (i, &src) in index.iter().enumerate() {
                        for (sv, gv) in s.data_mut()[src * c..(src + 1) * c].iter_mut().zip(g.row(i)) {
                            *sv += gv;
                        }
                    }
                }
            }
            OpKind::ScatterAddRows { index, .. } => {
                if needs(0) {
                    let x = val(0);
                    let c = x.shape()[1];
                    let s = slot(adj, p[0], x.shape());
                    for (i, &dst) in index.iter().enumerate() {
                        for (sv, gv) in s.data_mut()[i * c..(i + 1) * c].iter_mut().zip(g.row(dst)) {
                            *sv += gv;
                        }
                    }
                }
            }
            OpKind::SpMM(pattern) => {
                let (vals, dense) = (val(0), val(1));
                let c = dense.shape()[1];
                if needs(0) {
                    let s = slot(adj, p[0], vals.shape());
                    for (e, sv) in s.data_mut().iter_mut().enumerate() {
                        let grow = g.row(pattern.row_idx[e]);
                        let drow = dense.row(pattern.col_idx[e]);
                        *sv += grow.iter().zip(drow).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                if needs(1) {
                    let s = slot(adj, p[1], dense.shape());
                    for (e, &w) in vals.data().iter().enumerate() {
                        let (r, col) = (pattern.row_idx[e], pattern.col_idx[e]);
                        for (sv, gv) in s.data_mut()[col * c..(col + 1) * c].iter_mut().zip(g.row(r)) {
                            *sv += w * gv;
                        }
                    }
                }
            }
            OpKind::SegmentSum { segment } | OpKind::SegmentMean { segment } => {
                if needs(0) {
                    let x = val(0);
                    let c = x.shape()[1];
                    let scale = if matches!(node.kind, OpKind::SegmentMean { .. }) { 1.0 / *segment as f64 } else { 1.0 };
                    let s = slot(adj, p[0], x.shape());
                    for (i, srow) in s.data_mut().chunks_exact_mut(c).enumerate() {
                        for (sv, gv) in srow.iter_mut().zip(g.row(i / segment)) {
                            *sv += gv * scale;
                        }
                    }
                }
            }
            OpKind::SegmentMax { .. } => {
                if needs(0) {
                    let x = val(0);
                    let c = x.shape()[1];
                    let s = slot(adj, p[0], x.shape());
                    for (k, (&src, &gv)) in node.argmax.iter().zip(g.data()).enumerate() {
                        s.data_mut()[src * c + k % c] += gv;
                    }
                }
            }
            OpKind::LinearRecurrence { steps } => {
                let (decay, init) = (val(0), val(2));
                let block = init.len();
                let f = decay.data();
                let h = out.data();
                let mut carry = vec![0.0; block];
                let mut d_decay = needs(0).then(|| vec![0.0; f.len()]);
                let mut d_input = needs(1).then(|| vec![0.0; f.len()]);
                for t in (0..*steps).rev() {
                    let cur = t * block;
                    for k in 0..block {
                        let gh = g.data()[cur + k] + carry[k];
                        if let Some(du) = d_input.as_mut() {
                            du[cur + k] = gh;
                        }
                        if let Some(df) = d_decay.as_mut() {
                            let prev = if t == 0 { init.data()[k] } else { h[cur - block + k] };
                            df[cur + k] = gh * prev;
                        }
                        carry[k] = gh * f[cur + k];
                    }
                }
                if let Some(df) = d_decay {
                    slot(adj, p[0], decay.shape()).add_assign(&Tensor::from_parts(decay.shape().to_vec(), df));
                }
                if let Some(du) = d_input {
                    slot(adj, p[1], decay.shape()).add_assign(&Tensor::from_parts(decay.shape().to_vec(), du));
                }
                if needs(2) {
                    slot(adj, p[2], init.shape()).add_assign(&Tensor::from_parts(init.shape().to_vec(), carry));
                }
            }
            OpKind::SsmScan { steps } => {
                let (proj, log_decay, init) = (val(0), val(1), val(2));
                let h = log_decay.len();
                let width = 1 + 3 * h;
                let r = proj.shape()[0];
                let m = r / steps;
                let decay: Vec<f64> = log_decay.data().iter().map(|v| v.exp()).collect();
                let (pd, yh, gd) = (proj.data(), out.data(), g.data());
                let mut carry = vec![0.0; m * h];
                let mut d_proj = vec![0.0; pd.len()];
                let mut d_decay = vec![0.0; h];
                for row in (0..r).rev() {
                    let pr = &pd[row * width..(row + 1) * width];
                    let dp = &mut d_proj[row * width..(row + 1) * width];
                    let delta = softplus(pr[0]);
                    let mut d_delta = 0.0;
                    for k in 0..h {
                        let c = row % m * h + k;
                        let prev = if row < m { init.data()[c] } else { yh[(row - m) * 2 * h + h + k] };
                        let state = yh[row * 2 * h + h + k];
                        let gy = gd[row * 2 * h + k];
                        let gs = gd[row * 2 * h + h + k] + gy * pr[1 + h + k] + carry[c];
                        dp[1 + h + k] += gy * state;
                        let x = delta * decay[k];
                        let retain = -x.clamp(0.0, 1.0) + 1.0;
                        carry[c] = gs * retain;
                        // update = B E Δ
                        let be = pr[1 + k] * pr[1 + 2 * h + k];
                        dp[1 + k] += gs * delta * pr[1 + 2 * h + k];
                        dp[1 + 2 * h + k] += gs * delta * pr[1 + k];
                        d_delta += gs * be;
                        if (0.0..=1.0).contains(&x) {
                            let gx = -gs * prev;
                            d_delta += gx * decay[k];
                            d_decay[k] += gx * delta;
                        }
                    }
                    dp[0] += d_delta * sigmoid(pr[0]);
                }
                if needs(0) {
                    slot(adj, p[0], proj.shape()).add_assign(&Tensor::from_parts(proj.shape().to_vec(), d_proj));
                }
                if needs(1) {
                    let d: Vec<f64> = d_decay.iter().zip(&decay).map(|(g, d)| g * d).collect();
                    slot(adj, p[1], log_decay.shape()).add_assign(&Tensor::from_parts(vec![1, h], d));
                }
                if needs(2) {
                    slot(adj, p[2], init.shape()).add_assign(&Tensor::from_parts(init.shape().to_vec(), carry));
                }
            }
        }
    }
}

fn slot<'a>(adj: &'a mut [Option<Tensor>], idx: usize, shape: &[usize]) -> &'a mut Tensor {
    adj[idx].get_or_insert_with(|| Tensor::zeros(shape))
}

/// Convenience wrappers over [`Tape::apply`].
impl Tape {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.apply(OpKind::Scale(k), &[a])
    }
    pub fn shift(&mut self, a: Var, k: f64) -> Result<Var> {
        self.apply(OpKind::Shift(k), &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sigmoid, &[a])
    }
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Softplus, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Tanh, &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Log, &[a])
    }
    pub fn powf(&mut self, a: Var, e: f64) -> Result<Var> {
        self.apply(OpKind::Powf(e), &[a])
    }
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(OpKind::Clamp { lo, hi }, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sum, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Mean, &[a])
    }
    pub fn max(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Max, &[a])
    }
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(OpKind::ConcatCols, parts)
    }
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(OpKind::ConcatRows, parts)
    }
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(OpKind::SliceRows { start, end }, &[a])
    }
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(OpKind::SliceCols { start, end }, &[a])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Transpose, &[a])
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(OpKind::Reshape(shape.to_vec()), &[a])
    }
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.apply(OpKind::AddRowBias, &[a, bias])
    }
    pub fn scale_rows(&mut self, a: Var, col: Var) -> Result<Var> {
        self.apply(OpKind::ScaleRows, &[a, col])
    }
    pub fn gather_rows(&mut self, a: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        self.apply(OpKind::GatherRows(index), &[a])
    }
    pub fn scatter_add_rows(&mut self, a: Var, index: Arc<Vec<usize>>, rows: usize) -> Result<Var> {
        self.apply(OpKind::ScatterAddRows { index, rows }, &[a])
    }
    pub fn spmm(&mut self, values: Var, dense: Var, pattern: Arc<SparsePattern>) -> Result<Var> {
        self.apply(OpKind::SpMM(pattern), &[values, dense])
    }
    pub fn segment_sum(&mut self, a: Var, segment: usize) -> Result<Var> {
        self.apply(OpKind::SegmentSum { segment }, &[a])
    }
    pub fn segment_mean(&mut self, a: Var, segment: usize) -> Result<Var> {
        self.apply(OpKind::SegmentMean { segment }, &[a])
    }
    pub fn segment_max(&mut self, a: Var, segment: usize) -> Result<Var> {
        self.apply(OpKind::SegmentMax { segment }, &[a])
    }
    pub fn linear_recurrence(&mut self, decay: Var, input: Var, init: Var, steps: usize) -> Result<Var> {
        self.apply(OpKind::LinearRecurrence { steps }, &[decay, input, init])
    }

    /// Fused selective SSM; see [`OpKind::SsmScan`].
    pub fn ssm_scan(&mut self, proj: Var, log_decay: Var, init: Var, steps: usize) -> Result<Var> {
        self.apply(OpKind::SsmScan { steps }, &[proj, log_decay, init])
    }
    /// `x @ w + b` with a `1 x out` bias row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row_bias(xw, b)
    }
}
