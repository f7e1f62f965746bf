//! Recurrent cells (selective state space and GRU) and the node and edge
//! stream encoders built from them.
//!
//! Every sequence batch is laid out time-major: rows `t * M .. (t + 1) * M`
//! hold step `t` of all `M` sequences.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::graphgen::{EdgeSeries, TemporalGraph};
use crate::tensor::Tensor;

pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_LAYERS: usize = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    #[default]
    Ssm,
    Gru,
}

impl CellKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CellKind::Ssm => "ssm",
            CellKind::Gru => "gru",
        }
    }
}

impl FromStr for CellKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssm" | "mamba" => Ok(CellKind::Ssm),
            "gru" => Ok(CellKind::Gru),
            other => Err(Error::Config(format!("unknown cell kind {other:?}"))),
        }
    }
}

/// Selective state-space cell.
///
/// `w` (`d_in x (1 + 3h)`) and `b` hold the projections as column blocks
/// `[Δ | B | C | E]`; the decay is `D = exp(log_decay)`.
#[derive(Clone, Debug)]
pub struct SsmCell {
    pub d_in: usize,
    pub hidden: usize,
    pub w: ParamId,
    pub b: ParamId,
    pub log_decay: ParamId,
}

#[derive(Clone, Debug)]
pub struct GruCell {
    pub d_in: usize,
    pub hidden: usize,
    /// Input weights, column blocks `[z | r | n]`.
    pub wx: ParamId,
    pub bx: ParamId,
    pub wh: ParamId,
    pub bh: ParamId,
}

#[derive(Clone, Debug)]
pub enum Cell {
    Ssm(SsmCell),
    Gru(GruCell),
}

/// Input-dependent terms of a cell for every row of a batch.
pub enum Prepared {
    /// Projections `[Δ | B | C | E]` of every row and the log decay rates.
    Ssm { proj: Var, log_decay: Var },
    Gru { gates: Var },
}

/// Per-step results of a scan, time-major `T·M x h`.
pub struct ScanOutput {
    pub outputs: Var,
    pub states: Var,
    pub last_output: Var,
    pub last_state: Var,
}

fn first_bad_step(t: &Tensor, rows_per_step: usize) -> Option<usize> {
    let width = t.cols() * rows_per_step;
    t.data()
        .chunks(width)
        .position(|chunk| chunk.iter().any(|v| !v.is_finite()))
}

impl Cell {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        kind: CellKind,
        d_in: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Cell> {
        match kind {
            CellKind::Ssm => {
                // Δ and E are Glorot per block; B and C start at exactly 1 so an
                // untrained cell is a leaky integrator of the embedding.
                let width = 1 + 3 * hidden;
                let (lim_delta, lim_e) = ((6.0 / (d_in + 1) as f64).sqrt(), (6.0 / (d_in + hidden) as f64).sqrt());
                let mut w = vec![0.0; d_in * width];
                for row in w.chunks_mut(width) {
                    row[0] = rng.random_range(-lim_delta..=lim_delta);
                    for v in &mut row[1 + 2 * hidden..] {
                        *v = rng.random_range(-lim_e..=lim_e);
                    }
                }
                let w = store.register(format!("{prefix}.w"), Tensor::matrix(d_in, width, w)?)?;
                let bias = (0..1 + 3 * hidden).map(|c| if (1..1 + 2 * hidden).contains(&c) { 1.0 } else { 0.0 }).collect();
                let b = store.register(format!("{prefix}.b"), Tensor::matrix(1, 1 + 3 * hidden, bias)?)?;
                let decay = (0..hidden)
                    .map(|_| rng.random_range(0.1f64..1.0).ln())
                    .collect();
                let log_decay = store.register(format!("{prefix}.log_decay"), Tensor::matrix(1, hidden, decay)?)?;
                Ok(Cell::Ssm(SsmCell { d_in, hidden, w, b, log_decay }))
            }
            CellKind::Gru => {
                let wx = store.register_glorot(format!("{prefix}.wx"), d_in, 3 * hidden, rng)?;
                let bx = store.register(format!("{prefix}.bx"), Tensor::zeros(&[1, 3 * hidden]))?;
                let wh = store.register_glorot(format!("{prefix}.wh"), hidden, 3 * hidden, rng)?;
                let bh = store.register(format!("{prefix}.bh"), Tensor::zeros(&[1, 3 * hidden]))?;
                Ok(Cell::Gru(GruCell { d_in, hidden, wx, bx, wh, bh }))
            }
        }
    }

    pub fn hidden(&self) -> usize {
        match self {
            Cell::Ssm(c) => c.hidden,
            Cell::Gru(c) => c.hidden,
        }
    }

    pub fn d_in(&self) -> usize {
        match self {
            Cell::Ssm(c) => c.d_in,
            Cell::Gru(c) => c.d_in,
        }
    }

    pub fn kind(&self) -> CellKind {
        match self {
            Cell::Ssm(_) => CellKind::Ssm,
            Cell::Gru(_) => CellKind::Gru,
        }
    }

    pub fn prepare(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Prepared> {
        match self {
            Cell::Ssm(c) => {
                let w = tape.param(store, c.w);
                let b = tape.param(store, c.b);
                let proj = tape.affine(x, w, b)?;
                let log_decay = tape.param(store, c.log_decay);
                Ok(Prepared::Ssm { proj, log_decay })
            }
            Cell::Gru(c) => {
                let wx = tape.param(store, c.wx);
                let bx = tape.param(store, c.bx);
                Ok(Prepared::Gru { gates: tape.affine(x, wx, bx)? })
            }
        }
    }

    /// Advances `state` (`M x h`) by the prepared rows `start..start + M`.
    /// Returns `(new_state, output)`.
    pub fn advance(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        prep: &Prepared,
        start: usize,
        state: Var,
    ) -> Result<(Var, Var)> {
        let m = tape.shape(state)[0];
        match (self, prep) {
            (Cell::Ssm(c), Prepared::Ssm { proj, log_decay }) => {
                let rows = tape.slice_rows(*proj, start, start + m)?;
                let out = tape.ssm_scan(rows, *log_decay, state, 1)?;
                let y = tape.slice_cols(out, 0, c.hidden)?;
                let next = tape.slice_cols(out, c.hidden, 2 * c.hidden)?;
                Ok((next, y))
            }
            (Cell::Gru(c), Prepared::Gru { gates }) => {
                let h = c.hidden;
                let xg = tape.slice_rows(*gates, start, start + m)?;
                let wh = tape.param(store, c.wh);
                let bh = tape.param(store, c.bh);
                let hg = tape.affine(state, wh, bh)?;
                let xz = tape.slice_cols(xg, 0, h)?;
                let xr = tape.slice_cols(xg, h, 2 * h)?;
                let xn = tape.slice_cols(xg, 2 * h, 3 * h)?;
                let hz = tape.slice_cols(hg, 0, h)?;
                let hr = tape.slice_cols(hg, h, 2 * h)?;
                let hn = tape.slice_cols(hg, 2 * h, 3 * h)?;
                let z = tape.add(xz, hz)?;
                let z = tape.sigmoid(z)?;
                let r = tape.add(xr, hr)?;
                let r = tape.sigmoid(r)?;
                let rn = tape.mul(r, hn)?;
                let n = tape.add(xn, rn)?;
                let n = tape.tanh(n)?;
                // h' = n + z ⊙ (h - n)
                let diff = tape.sub(state, n)?;
                let zd = tape.mul(z, diff)?;
                let next = tape.add(n, zd)?;
                Ok((next, next))
            }
            _ => Err(Error::Contract("prepared terms belong to a different cell kind".into())),
        }
    }

    /// Runs the cell over `steps` time-major blocks of `x`, from `init` or zeros.
    pub fn scan(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        steps: usize,
        init: Option<Var>,
    ) -> Result<ScanOutput> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.d_in() || steps == 0 || !shape[0].is_multiple_of(steps) {
            return Err(Error::shape("scan", &shape, &[steps, self.d_in()]));
        }
        let m = shape[0] / steps;
        let h = self.hidden();
        let init = match init {
            Some(v) => v,
            None => tape.constant(Tensor::zeros(&[m, h])),
        };
        let prep = self.prepare(tape, store, x)?;
        let out = match &prep {
            Prepared::Ssm { proj, log_decay } => {
                let out = tape.ssm_scan(*proj, *log_decay, init, steps)?;
                let outputs = tape.slice_cols(out, 0, h)?;
                let states = tape.slice_cols(out, h, 2 * h)?;
                let last_state = tape.slice_rows(states, (steps - 1) * m, steps * m)?;
                let last_output = tape.slice_rows(outputs, (steps - 1) * m, steps * m)?;
                ScanOutput { outputs, states, last_output, last_state }
            }
            Prepared::Gru { .. } => {
                let mut state = init;
                let mut rows = Vec::with_capacity(steps);
                for t in 0..steps {
                    let (next, _) = self.advance(tape, store, &prep, t * m, state)?;
                    rows.push(next);
                    state = next;
                }
                let states = tape.concat_rows(&rows)?;
                ScanOutput { outputs: states, states, last_output: state, last_state: state }
            }
        };
        let op = match self {
            Cell::Ssm(_) => "ssm_scan",
            Cell::Gru(_) => "gru_scan",
        };
        if let Some(step) = first_bad_step(tape.value(out.outputs), m) {
            return Err(Error::Numeric { op, step });
        }
        if let Some(step) = first_bad_step(tape.value(out.states), m) {
            return Err(Error::Numeric { op, step });
        }
        Ok(out)
    }
}

/// Stacked cells; layer `l + 1` reads the per-step outputs of layer `l`.
#[derive(Clone, Debug)]
pub struct StreamEncoder {
    pub cells: Vec<Cell>,
}

impl StreamEncoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        kind: CellKind,
        d_in: usize,
        hidden: usize,
        layers: usize,
        rng: &mut impl Rng,
    ) -> Result<StreamEncoder> {
        if layers == 0 {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        let cells = (0..layers)
            .map(|l| {
                let width = if l == 0 { d_in } else { hidden };
                Cell::new(store, &format!("{prefix}.{l}"), kind, width, hidden, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(StreamEncoder { cells })
    }

    pub fn hidden(&self) -> usize {
        self.cells[0].hidden()
    }

    /// Final output of the top layer for every sequence (`M x h`).
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, x: Var, steps: usize) -> Result<Var> {
        Ok(self.encode_all(tape, store, x, steps)?.pop().expect("at least one layer").last_output)
    }

    pub fn encode_all(&self, tape: &mut Tape, store: &ParamStore, x: Var, steps: usize) -> Result<Vec<ScanOutput>> {
        let mut input = x;
        let mut outs = Vec::with_capacity(self.cells.len());
        for cell in &self.cells {
            let out = cell.scan(tape, store, input, steps, None)?;
            input = out.outputs;
            outs.push(out);
        }
        Ok(outs)
    }
}

/// `M` sequences of `T` steps; `lengths` records the valid prefix of each.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    /// `[M, T, d_in]`, sequence-major.
    pub inputs: Tensor,
    pub lengths: Vec<usize>,
}

impl SequenceBatch {
    pub fn new(inputs: Tensor, lengths: Vec<usize>) -> Result<Self> {
        if inputs.rank() != 3 {
            return Err(Error::shape("sequence_batch", inputs.shape(), &[0, 0, 0]));
        }
        let (m, t) = (inputs.shape()[0], inputs.shape()[1]);
        if lengths.len() != m || lengths.iter().any(|&l| l > t) {
            return Err(Error::Contract(format!("lengths must be {m} values of at most {t}")));
        }
        Ok(SequenceBatch { inputs, lengths })
    }

    pub fn full(inputs: Tensor) -> Result<Self> {
        let (m, t) = (inputs.shape().first().copied().unwrap_or(0), inputs.shape().get(1).copied().unwrap_or(0));
        Self::new(inputs, vec![t; m])
    }

    pub fn count(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn steps(&self) -> usize {
        self.inputs.shape()[1]
    }

    /// Rows reordered to time-major `T·M x d_in`.
    pub fn time_major(&self) -> Result<Tensor> {
        if self.lengths.iter().any(|&l| l != self.steps()) {
            return Err(Error::Contract("encoders take sequences of full length only".into()));
        }
        let (m, t, d) = (self.count(), self.steps(), self.inputs.shape()[2]);
        let src = self.inputs.data();
        let mut data = Vec::with_capacity(m * t * d);
        for step in 0..t {
            for seq in 0..m {
                let off = (seq * t + step) * d;
                data.extend_from_slice(&src[off..off + d]);
            }
        }
        Tensor::new(vec![t * m, d], data)
    }
}

/// Node features of `tg` as a sequence batch (one sequence per channel).
pub fn node_sequences(tg: &TemporalGraph) -> Result<SequenceBatch> {
    SequenceBatch::full(tg.x.clone())
}

/// Aggregated edges of `tg` with their scalar weight sequences.
pub fn edge_sequences(tg: &TemporalGraph) -> Result<(Vec<EdgeSeries>, SequenceBatch)> {
    let edges = tg.aggregated_edges();
    if edges.is_empty() {
        return Err(Error::Structural("graph has no edges".into()));
    }
    let t = tg.steps();
    let data = edges.iter().flat_map(|e| e.weights.iter().copied()).collect();
    let batch = SequenceBatch::full(Tensor::new(vec![edges.len(), t, 1], data)?)?;
    Ok((edges, batch))
}

/// Encodes each channel's feature sequence: `N x h`.
pub fn encode_node_stream(
    tape: &mut Tape,
    store: &ParamStore,
    encoder: &StreamEncoder,
    tg: &TemporalGraph,
) -> Result<Var> {
    let x = tape.constant(node_sequences(tg)?.time_major()?);
    encoder.encode(tape, store, x, tg.steps())
}

/// Encodes each aggregated edge's weight sequence: `E_agg x h`, rows in the
/// order of [`TemporalGraph::aggregated_edges`].
pub fn encode_edge_stream(
    tape: &mut Tape,
    store: &ParamStore,
    encoder: &StreamEncoder,
    tg: &TemporalGraph,
) -> Result<(Vec<EdgeSeries>, Var)> {
    let (edges, batch) = edge_sequences(tg)?;
    let x = tape.constant(batch.time_major()?);
    Ok((edges, encoder.encode(tape, store, x, tg.steps())?))
}
