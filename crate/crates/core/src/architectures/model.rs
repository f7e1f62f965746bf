use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::architectures::{Family, GraphBatch, ModelConfig, RecurrentGraph};
use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::graphgen::TemporalGraph;
use crate::sequence::{Cell, StreamEncoder};
use crate::spatial::{gcn_layer, lap_pe, pool, symmetrize, EdgeList, Propagation};
use crate::tensor::Tensor;

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug)]
enum Parts {
    /// Graph-then-time and time-and-graph.
    Staged {
        gnn_in: Vec<ParamId>,
        cells: StreamEncoder,
        /// Recurrent-path GCN weights, one stack per cell layer (time-and-graph only).
        recurrent: Vec<Vec<ParamId>>,
    },
    TimeThenGraph {
        node: StreamEncoder,
        edge: StreamEncoder,
        edge_w: ParamId,
        edge_b: ParamId,
        gcn: Vec<ParamId>,
    },
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    parts: Parts,
    head_w: ParamId,
    head_b: ParamId,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// Record intermediate values in [`ForwardTrace`].
    pub trace: bool,
    /// Replaces the computed Laplacian positions (row-major `B·N x K`).
    pub positions: Option<Vec<f64>>,
    /// Also evaluate edge strengths at every step of the edge stream.
    pub step_strengths: bool,
}

/// Intermediate values of one forward pass; empty unless requested.
#[derive(Clone, Debug, Default)]
pub struct ForwardTrace {
    /// GCN input-path output over all steps, `T·B·N x h`.
    pub gnn_in: Option<Tensor>,
    /// Hidden states of each cell layer, `T·M x h`.
    pub states: Vec<Tensor>,
    /// Recurrent-path outputs per cell layer and step, `M x h`.
    pub recurrent: Vec<Vec<Tensor>>,
    pub node_embedding: Option<Tensor>,
    pub edge_embedding: Option<Tensor>,
    /// Learned strength of every aggregated edge, `E x 1`.
    pub strengths: Option<Tensor>,
    /// Aggregated edges `(src, dst)` per graph, in strength-row order.
    pub edges: Vec<Vec<(usize, usize)>>,
    pub positions: Option<Vec<f64>>,
    pub degenerate: bool,
    /// Strengths at every step, time-major `T·E x 1`.
    pub step_strengths: Option<Tensor>,
    /// Final node embeddings before pooling, `B·N x h`.
    pub readout: Option<Tensor>,
}

pub struct ModelOutput {
    pub z: Var,
    pub logit: Var,
    pub prob: Var,
    pub trace: ForwardTrace,
}

fn gcn_stack(
    store: &mut ParamStore,
    prefix: &str,
    d_in: usize,
    hidden: usize,
    layers: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<ParamId>> {
    (0..layers)
        .map(|l| {
            let fan_in = if l == 0 { d_in } else { hidden };
            store.register_glorot(format!("{prefix}.{l}"), fan_in, hidden, rng)
        })
        .collect()
}

fn run_gcn(tape: &mut Tape, store: &ParamStore, prop: &Propagation, x: Var, weights: &[ParamId]) -> Result<Var> {
    let mut h = x;
    for (l, &id) in weights.iter().enumerate() {
        let theta = tape.param(store, id);
        h = gcn_layer(tape, prop, h, theta, l + 1 == weights.len())?;
    }
    Ok(h)
}

fn constant_prop(tape: &mut Tape, nodes: usize, edges: (Vec<usize>, Vec<usize>, Vec<f64>)) -> Result<Propagation> {
    let (src, dst, w) = edges;
    EdgeList::new(nodes, src, dst)?.constant_propagation(tape, &w)
}

impl Model {
    /// Registers all parameters with seeded Glorot initialization.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (h, cell, layers) = (cfg.hidden, cfg.arch.cell, cfg.seq_layers);
        let parts = match cfg.arch.family {
            Family::GraphThenTime | Family::TimeAndGraph => {
                let gnn_in = gcn_stack(&mut store, "gnn_in", cfg.d_in, h, cfg.gcn_layers, &mut rng)?;
                let cells = StreamEncoder::new(&mut store, "cell", cell, h, h, layers, &mut rng)?;
                let recurrent = if cfg.arch.family == Family::TimeAndGraph && cfg.recurrent == RecurrentGraph::Gcn {
                    (0..layers)
                        .map(|l| gcn_stack(&mut store, &format!("gnn_rc.{l}"), h, h, cfg.gcn_layers, &mut rng))
                        .collect::<Result<Vec<_>>>()?
                } else {
                    Vec::new()
                };
                Parts::Staged { gnn_in, cells, recurrent }
            }
            Family::TimeThenGraph => {
                let node = StreamEncoder::new(&mut store, "node", cell, cfg.d_in, h, layers, &mut rng)?;
                let edge = StreamEncoder::new(&mut store, "edge", cell, 1, h, layers, &mut rng)?;
                let edge_w = store.register_glorot("f_edge.w", h, 1, &mut rng)?;
                let edge_b = store.register("f_edge.b", Tensor::zeros(&[1, 1]))?;
                let gcn = gcn_stack(&mut store, "gcn", h + cfg.pe_width(), h, cfg.gcn_layers, &mut rng)?;
                Parts::TimeThenGraph { node, edge, edge_w, edge_b, gcn }
            }
        };
        let width = cfg.pool.width(cfg.nodes, h);
        let head_w = store.register_glorot("head.w", width, 1, &mut rng)?;
        let head_b = store.register("head.b", Tensor::zeros(&[1, 1]))?;
        Ok(Model { cfg, store, parts, head_w, head_b })
    }

    pub fn batch(&self, graphs: &[TemporalGraph]) -> Result<GraphBatch> {
        let batch = GraphBatch::new(graphs, self.cfg.arch.mode)?;
        if batch.nodes != self.cfg.nodes || batch.features != self.cfg.d_in {
            return Err(Error::shape(
                "model input",
                &[self.cfg.nodes, self.cfg.d_in],
                &[batch.nodes, batch.features],
            ));
        }
        Ok(batch)
    }

    pub fn forward(&self, tape: &mut Tape, batch: &GraphBatch, opts: &ForwardOptions) -> Result<ModelOutput> {
        let mut trace = ForwardTrace::default();
        let readout = match &self.parts {
            Parts::Staged { gnn_in, cells, recurrent } => {
                self.forward_staged(tape, batch, gnn_in, cells, recurrent, opts, &mut trace)?
            }
            Parts::TimeThenGraph { node, edge, edge_w, edge_b, gcn } => {
                self.forward_time_then_graph(tape, batch, node, edge, *edge_w, *edge_b, gcn, opts, &mut trace)?
            }
        };
        if opts.trace {
            trace.readout = Some(tape.value(readout).clone());
        }
        let z = pool(tape, readout, batch.nodes, self.cfg.pool)?;
        let w = tape.param(&self.store, self.head_w);
        let b = tape.param(&self.store, self.head_b);
        let logit = tape.affine(z, w, b)?;
        let prob = tape.sigmoid(logit)?;
        Ok(ModelOutput { z, logit, prob, trace })
    }

    #[allow(clippy::too_many_arguments)]
    fn forward_staged(
        &self,
        tape: &mut Tape,
        batch: &GraphBatch,
        gnn_in: &[ParamId],
        cells: &StreamEncoder,
        recurrent: &[Vec<ParamId>],
        opts: &ForwardOptions,
        trace: &mut ForwardTrace,
    ) -> Result<Var> {
        let (t, m) = (batch.steps, batch.rows());
        let x = tape.constant(batch.node_features());
        let prop = constant_prop(tape, t * m, batch.all_step_edges())?;
        let mut input = run_gcn(tape, &self.store, &prop, x, gnn_in)?;
        if opts.trace {
            trace.gnn_in = Some(tape.value(input).clone());
        }
        let stepwise = self.cfg.arch.family == Family::TimeAndGraph;
        let step_props = if stepwise && !recurrent.is_empty() {
            (0..t)
                .map(|s| constant_prop(tape, m, batch.step_edges(s)))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        for (l, cell) in cells.cells.iter().enumerate() {
            let (outputs, states) = if stepwise {
                let rc = recurrent.get(l).map(Vec::as_slice);
                self.scan_time_and_graph(tape, cell, input, t, m, rc, &step_props, opts, trace)?
            } else {
                let out = cell.scan(tape, &self.store, input, t, None)?;
                (out.outputs, out.states)
            };
            if opts.trace {
                trace.states.push(tape.value(states).clone());
            }
            input = outputs;
        }
        tape.slice_rows(input, (t - 1) * m, t * m)
    }

    /// One cell layer stepped in time with the recurrent GCN (or identity) on `H_{t-1}`.
    #[allow(clippy::too_many_arguments)]
    fn scan_time_and_graph(
        &self,
        tape: &mut Tape,
        cell: &Cell,
        input: Var,
        steps: usize,
        m: usize,
        rc: Option<&[ParamId]>,
        step_props: &[Propagation],
        opts: &ForwardOptions,
        trace: &mut ForwardTrace,
    ) -> Result<(Var, Var)> {
        let prep = cell.prepare(tape, &self.store, input)?;
        let mut state = tape.constant(Tensor::zeros(&[m, cell.hidden()]));
        let mut outputs = Vec::with_capacity(steps);
        let mut states = Vec::with_capacity(steps);
        let mut rc_trace = Vec::new();
        for s in 0..steps {
            let carried = match rc {
                Some(weights) => run_gcn(tape, &self.store, &step_props[s], state, weights)?,
                None => state,
            };
            if opts.trace {
                rc_trace.push(tape.value(carried).clone());
            }
            let (next, y) = cell.advance(tape, &self.store, &prep, s * m, carried)?;
            if !tape.value(next).is_finite() || !tape.value(y).is_finite() {
                return Err(Error::Numeric { op: "time_and_graph", step: s });
            }
            state = next;
            states.push(next);
            outputs.push(y);
        }
        if opts.trace {
            trace.recurrent.push(rc_trace);
        }
        Ok((tape.concat_rows(&outputs)?, tape.concat_rows(&states)?))
    }

    #[allow(clippy::too_many_arguments)]
    fn forward_time_then_graph(
        &self,
        tape: &mut Tape,
        batch: &GraphBatch,
        node: &StreamEncoder,
        edge: &StreamEncoder,
        edge_w: ParamId,
        edge_b: ParamId,
        gcn: &[ParamId],
        opts: &ForwardOptions,
        trace: &mut ForwardTrace,
    ) -> Result<Var> {
        let (n, t, m) = (batch.nodes, batch.steps, batch.rows());
        let x = tape.constant(batch.node_features());
        let h_node = node.encode(tape, &self.store, x, t)?;

        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut per_graph = Vec::with_capacity(batch.len());
        let mut series = Vec::new();
        for (b, g) in batch.graphs.iter().enumerate() {
            let agg = g.aggregated_edges();
            if agg.is_empty() {
                return Err(Error::Structural(format!("graph {b} has no edges")));
            }
            per_graph.push(agg.iter().map(|e| (e.src, e.dst)).collect::<Vec<_>>());
            for e in agg {
                src.push(b * n + e.src);
                dst.push(b * n + e.dst);
                series.push(e.weights);
            }
        }
        let e_total = series.len();
        let mut seq = Vec::with_capacity(t * e_total);
        for s in 0..t {
            seq.extend(series.iter().map(|w| w[s]));
        }
        let seq = tape.constant(Tensor::new(vec![t * e_total, 1], seq)?);
        let layers = edge.encode_all(tape, &self.store, seq, t)?;
        let top = layers.last().expect("at least one layer");
        let h_edge = top.last_output;
        let ew = tape.param(&self.store, edge_w);
        let eb = tape.param(&self.store, edge_b);
        let pre = tape.affine(h_edge, ew, eb)?;
        let strength = tape.softplus(pre)?;
        if opts.step_strengths {
            let all = tape.affine(top.outputs, ew, eb)?;
            let all = tape.softplus(all)?;
            trace.step_strengths = Some(tape.value(all).clone());
        }

        let k = self.cfg.pe_width();
        let node_input = if k > 0 {
            let positions = match &opts.positions {
                Some(p) => {
                    if p.len() != m * k {
                        return Err(Error::shape("positions", &[p.len()], &[m, k]));
                    }
                    p.clone()
                }
                None => {
                    let a = tape.value(strength).data();
                    let mut out = Vec::with_capacity(m * k);
                    let mut offset = 0;
                    for edges in &per_graph {
                        let list: Vec<(usize, usize, f64)> = edges
                            .iter()
                            .enumerate()
                            .map(|(e, &(i, j))| (i, j, a[offset + e]))
                            .collect();
                        offset += edges.len();
                        let pe = lap_pe(&symmetrize(n, &list), n, k)?;
                        trace.degenerate |= pe.degenerate;
                        out.extend(pe.positions);
                    }
                    out
                }
            };
            let p = tape.constant(Tensor::new(vec![m, k], positions.clone())?);
            if opts.trace {
                trace.positions = Some(positions);
            }
            tape.concat_cols(&[h_node, p])?
        } else {
            h_node
        };
        if opts.trace {
            trace.node_embedding = Some(tape.value(h_node).clone());
            trace.edge_embedding = Some(tape.value(h_edge).clone());
            trace.strengths = Some(tape.value(strength).clone());
        }
        trace.edges = per_graph;
        let prop = EdgeList::new(m, src, dst)?.propagation(tape, strength)?;
        run_gcn(tape, &self.store, &prop, node_input, gcn)
    }

    /// Probabilities for a batch without recording gradients.
    pub fn predict(&self, batch: &GraphBatch) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch, &ForwardOptions::default())?;
        Ok(tape.value(out.prob).data().to_vec())
    }

    /// Mean BCE over the batch and its gradient for every parameter.
    pub fn loss_and_grads(&self, batch: &GraphBatch, labels: &[u8]) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch, &ForwardOptions::default())?;
        let loss = bce_loss(&mut tape, out.prob, labels)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?.into_param_grads(&self.store);
        Ok((value, grads))
    }

    /// Learned strength of every aggregated edge at every step, as `T`
    /// dense `N x N` matrices (time-then-graph only).
    pub fn snapshot_strengths(&self, graph: &TemporalGraph) -> Result<Vec<Vec<f64>>> {
        if self.cfg.arch.family != Family::TimeThenGraph {
            return Err(Error::Config("edge strengths exist only for time-then-graph models".into()));
        }
        let batch = self.batch(std::slice::from_ref(graph))?;
        let mut tape = Tape::new();
        let opts = ForwardOptions { step_strengths: true, ..Default::default() };
        let out = self.forward(&mut tape, &batch, &opts)?;
        let all = out.trace.step_strengths.expect("requested");
        let edges = &out.trace.edges[0];
        let (n, e) = (batch.nodes, edges.len());
        Ok((0..batch.steps)
            .map(|s| {
                let mut a = vec![0.0; n * n];
                for (k, &(i, j)) in edges.iter().enumerate() {
                    a[i * n + j] = all.data()[s * e + k];
                }
                a
            })
            .collect())
    }

    pub(crate) fn from_parts_unchecked(cfg: ModelConfig, store: ParamStore) -> Result<Model> {
        let mut fresh = Model::new(cfg, 0)?;
        fresh.store.load_values(&store)?;
        if fresh.store.len() != store.len() {
            return Err(Error::Load {
                expected: format!("{} parameters", fresh.store.len()),
                found: format!("{} parameters", store.len()),
            });
        }
        Ok(fresh)
    }

    pub fn parameter_count(&self) -> usize {
        self.store.trainable_count()
    }
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(tape: &mut Tape, prob: Var, labels: &[u8]) -> Result<Var> {
    let shape = tape.shape(prob).to_vec();
    if shape != [labels.len(), 1] {
        return Err(Error::shape("bce_loss", &shape, &[labels.len(), 1]));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Contract("labels must be 0 or 1".into()));
    }
    let y = tape.constant(GraphBatch::labels_tensor(labels));
    let not_y = tape.constant(Tensor::from_parts(
        vec![labels.len(), 1],
        labels.iter().map(|&l| 1.0 - l as f64).collect(),
    ));
    let p = tape.clamp(prob, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let log_p = tape.log(p)?;
    let q = tape.scale(p, -1.0)?;
    let q = tape.shift(q, 1.0)?;
    let log_q = tape.log(q)?;
    let a = tape.mul(y, log_p)?;
    let b = tape.mul(not_y, log_q)?;
    let s = tape.add(a, b)?;
    let mean = tape.mean(s)?;
    tape.scale(mean, -1.0)
}
