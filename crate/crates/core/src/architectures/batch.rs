use crate::architectures::InputMode;
use crate::error::{Error, Result};
use crate::graphgen::{compress_static, TemporalGraph};
use crate::tensor::Tensor;

/// Graphs of equal `N`, `T`, `d` as the model sees them.
///
/// Node rows are time-major: row `(t * B + b) * N + i` is node `i` of graph
/// `b` at step `t`.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub graphs: Vec<TemporalGraph>,
    pub nodes: usize,
    pub steps: usize,
    pub features: usize,
}

impl GraphBatch {
    /// In implicit mode every adjacency is replaced by the temporal mean.
    pub fn new(graphs: &[TemporalGraph], mode: InputMode) -> Result<Self> {
        let first = graphs
            .first()
            .ok_or_else(|| Error::Contract("batch is empty".into()))?;
        let shape = first.x.shape().to_vec();
        if let Some(g) = graphs.iter().find(|g| g.x.shape() != shape.as_slice()) {
            return Err(Error::shape("graph_batch", &shape, g.x.shape()));
        }
        let graphs = match mode {
            InputMode::Explicit => graphs.to_vec(),
            InputMode::Implicit => graphs
                .iter()
                .map(|g| compress_static(g).as_temporal())
                .collect::<Result<Vec<_>>>()?,
        };
        Ok(GraphBatch { graphs, nodes: shape[0], steps: shape[1], features: shape[2] })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    /// Rows per step across the batch.
    pub fn rows(&self) -> usize {
        self.len() * self.nodes
    }

    /// Node features, time-major `T·B·N x d`.
    pub fn node_features(&self) -> Tensor {
        let (n, t, d) = (self.nodes, self.steps, self.features);
        let mut data = Vec::with_capacity(t * self.rows() * d);
        for step in 0..t {
            for g in &self.graphs {
                let x = g.x.data();
                for i in 0..n {
                    let off = (i * t + step) * d;
                    data.extend_from_slice(&x[off..off + d]);
                }
            }
        }
        Tensor::from_parts(vec![t * self.rows(), d], data)
    }

    /// Directed edges of step `t` over the `B·N` rows of one step.
    pub fn step_edges(&self, t: usize) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
        let (mut src, mut dst, mut w) = (Vec::new(), Vec::new(), Vec::new());
        for (b, g) in self.graphs.iter().enumerate() {
            for (i, j, v) in g.edges_at(t) {
                src.push(b * self.nodes + i);
                dst.push(b * self.nodes + j);
                w.push(v);
            }
        }
        (src, dst, w)
    }

    /// Directed edges of every step, block-diagonal over the `T·B·N` rows.
    pub fn all_step_edges(&self) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
        let (mut src, mut dst, mut w) = (Vec::new(), Vec::new(), Vec::new());
        for t in 0..self.steps {
            let off = t * self.rows();
            let (s, d, v) = self.step_edges(t);
            src.extend(s.into_iter().map(|x| x + off));
            dst.extend(d.into_iter().map(|x| x + off));
            w.extend(v);
        }
        (src, dst, w)
    }

    pub fn labels_tensor(labels: &[u8]) -> Tensor {
        Tensor::from_parts(vec![labels.len(), 1], labels.iter().map(|&l| l as f64).collect())
    }
}
