//! 1-WL color refinement and the counterexample pairs that separate the
//! input modes and architecture families.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use crate::architectures::{ArchKind, Family, ForwardOptions, ForwardTrace, InputMode, Model, ModelConfig};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::graphgen::TemporalGraph;
use crate::tensor::Tensor;

pub const DISTINGUISH_TOL: f64 = 1e-6;
pub const IDENTICAL_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct ColoredGraph {
    pub node_colors: Vec<u64>,
    pub edge_colors: BTreeMap<(usize, usize), u64>,
    pub undirected: bool,
}

impl ColoredGraph {
    /// Undirected graph; each edge is stored in both directions.
    pub fn undirected(node_colors: Vec<u64>, edges: &[(usize, usize, u64)]) -> Result<Self> {
        let n = node_colors.len();
        let mut edge_colors = BTreeMap::new();
        for &(i, j, c) in edges {
            if i >= n || j >= n {
                return Err(Error::Bounds(format!("edge ({i},{j}) outside 0..{n}")));
            }
            if i == j {
                return Err(Error::Structural(format!("self-loop at {i}")));
            }
            edge_colors.insert((i, j), c);
            edge_colors.insert((j, i), c);
        }
        Ok(ColoredGraph { node_colors, edge_colors, undirected: true })
    }

    pub fn nodes(&self) -> usize {
        self.node_colors.len()
    }

    fn neighbors(&self) -> Vec<Vec<(usize, u64)>> {
        let mut adj = vec![Vec::new(); self.nodes()];
        for (&(i, j), &c) in &self.edge_colors {
            adj[i].push((j, c));
            if !self.undirected {
                adj[j].push((i, c));
            }
        }
        adj
    }

    /// Disjoint union; nodes of `other` follow those of `self`.
    fn union(&self, other: &ColoredGraph) -> ColoredGraph {
        let off = self.nodes();
        let mut node_colors = self.node_colors.clone();
        node_colors.extend(&other.node_colors);
        let mut edge_colors = self.edge_colors.clone();
        edge_colors.extend(other.edge_colors.iter().map(|(&(i, j), &c)| ((i + off, j + off), c)));
        ColoredGraph { node_colors, edge_colors, undirected: self.undirected && other.undirected }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WLColoring {
    pub rounds: usize,
    pub colors: Vec<u64>,
    pub histogram: BTreeMap<u64, usize>,
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

type Signature = (u64, Vec<(u64, u64)>);

fn encode(sig: &Signature) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 16 * sig.1.len());
    out.extend(sig.0.to_le_bytes());
    out.extend((sig.1.len() as u64).to_le_bytes());
    for (a, b) in &sig.1 {
        out.extend(a.to_le_bytes());
        out.extend(b.to_le_bytes());
    }
    out
}

/// Dense relabeling ordered by (hash, signature); independent of node order.
fn relabel(sigs: &[Signature]) -> Vec<u64> {
    let keyed: BTreeSet<(u64, &Signature)> = sigs.iter().map(|s| (fnv1a(&encode(s)), s)).collect();
    let ids: BTreeMap<&Signature, u64> = keyed.into_iter().enumerate().map(|(k, (_, s))| (s, k as u64)).collect();
    sigs.iter().map(|s| ids[s]).collect()
}

fn histogram(colors: &[u64]) -> BTreeMap<u64, usize> {
    let mut h = BTreeMap::new();
    for &c in colors {
        *h.entry(c).or_insert(0) += 1;
    }
    h
}

fn class_count(colors: &[u64]) -> usize {
    colors.iter().collect::<BTreeSet<_>>().len()
}

/// Refines until the partition stops splitting or `max_rounds` is reached.
pub fn wl_refine(g: &ColoredGraph, max_rounds: usize) -> WLColoring {
    let adj = g.neighbors();
    let initial: Vec<Signature> = g.node_colors.iter().map(|&c| (c, Vec::new())).collect();
    let mut colors = relabel(&initial);
    let mut rounds = 0;
    while rounds < max_rounds {
        rounds += 1;
        let sigs: Vec<Signature> = adj
            .iter()
            .enumerate()
            .map(|(i, nb)| {
                let mut m: Vec<(u64, u64)> = nb.iter().map(|&(j, c)| (colors[j], c)).collect();
                m.sort_unstable();
                (colors[i], m)
            })
            .collect();
        let next = relabel(&sigs);
        let stable = class_count(&next) == class_count(&colors);
        colors = next;
        if stable {
            break;
        }
    }
    let histogram = histogram(&colors);
    WLColoring { rounds, colors, histogram }
}

/// True iff refinement on the disjoint union leaves differing color histograms.
pub fn wl_distinguishable(g1: &ColoredGraph, g2: &ColoredGraph) -> Result<bool> {
    let n = g1.nodes();
    if g2.nodes() != n {
        return Err(Error::Contract(format!("graphs have {n} and {} nodes", g2.nodes())));
    }
    let joint = g1.union(g2);
    let res = wl_refine(&joint, joint.nodes());
    Ok(histogram(&res.colors[..n]) != histogram(&res.colors[n..]))
}

/// Circulant graph on `n` nodes joining nodes at the given distances.
pub fn circulant(n: usize, distances: &[usize]) -> Vec<f64> {
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for &k in distances {
            let j = (i + k) % n;
            if j != i {
                a[i * n + j] = 1.0;
                a[j * n + i] = 1.0;
            }
        }
    }
    a
}

fn bits(a: &[f64]) -> Vec<u8> {
    a.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Aggregated graphs whose edge colors are interned per-step presence tuples
/// and node colors interned feature rows, with one table shared by all graphs.
pub fn temporal_signature_graphs(graphs: &[&TemporalGraph], use_features: bool) -> Result<Vec<ColoredGraph>> {
    let mut edge_table: BTreeMap<Vec<bool>, u64> = BTreeMap::new();
    let mut node_table: BTreeMap<Vec<u8>, u64> = BTreeMap::new();
    let mut out = Vec::with_capacity(graphs.len());
    for g in graphs {
        let (n, t, d) = (g.nodes(), g.steps(), g.feature_dim());
        let node_colors = (0..n)
            .map(|i| {
                let key = if use_features { bits(&g.x.data()[i * t * d..(i + 1) * t * d]) } else { Vec::new() };
                let next = node_table.len() as u64;
                *node_table.entry(key).or_insert(next)
            })
            .collect();
        let mut edge_colors = BTreeMap::new();
        for i in 0..n {
            for j in 0..n {
                let sig: Vec<bool> = (0..t).map(|s| g.weight(i, j, s) != 0.0 || g.weight(j, i, s) != 0.0).collect();
                if i != j && sig.iter().any(|&b| b) {
                    let next = edge_table.len() as u64;
                    edge_colors.insert((i, j), *edge_table.entry(sig).or_insert(next));
                }
            }
        }
        out.push(ColoredGraph { node_colors, edge_colors, undirected: true });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Distinguishable,
    Indistinguishable,
    Inconclusive,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Distinguishable => "distinguishable",
            Verdict::Indistinguishable => "indistinguishable",
            Verdict::Inconclusive => "inconclusive",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

/// Which model output the verdict compares.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Compare {
    Representation,
    Logit,
}

#[derive(Clone, Debug)]
pub struct CounterexamplePair {
    pub name: &'static str,
    pub first: TemporalGraph,
    pub second: TemporalGraph,
    pub compare: Compare,
    pub expected: Vec<(Family, InputMode, Verdict)>,
}

impl CounterexamplePair {
    pub fn expected_for(&self, family: Family, mode: InputMode) -> Verdict {
        self.expected
            .iter()
            .find(|(f, m, _)| *f == family && *m == mode)
            .map(|e| e.2)
            .expect("every cell has an expectation")
    }
}

fn cells(f: impl Fn(Family, InputMode) -> Verdict) -> Vec<(Family, InputMode, Verdict)> {
    Family::ALL
        .iter()
        .flat_map(|&fam| [InputMode::Implicit, InputMode::Explicit].map(|m| (fam, m, f(fam, m))))
        .collect()
}

/// Two 8-node graphs agreeing at the first step; at the second, one keeps
/// distances {1,2} and the other only distance 1.
pub fn build_dyncsl_pair() -> CounterexamplePair {
    let n = 8;
    let x = Tensor::ones(&[n, 2, 1]);
    let dense = circulant(n, &[1, 2]);
    let cycle = circulant(n, &[1]);
    let first = TemporalGraph::new(x.clone(), vec![dense.clone(), dense.clone()], false).expect("valid");
    let second = TemporalGraph::new(x, vec![dense, cycle], false).expect("valid");
    let expected = cells(|fam, _| match fam {
        Family::TimeThenGraph => Verdict::Distinguishable,
        _ => Verdict::Indistinguishable,
    });
    CounterexamplePair { name: "dyncsl", first, second, compare: Compare::Representation, expected }
}

/// Three nodes with features equal to their index; edges (0,1) and (1,2)
/// appear in opposite step order in the two graphs.
pub fn build_edge_order_pair() -> CounterexamplePair {
    let (n, t) = (3, 2);
    let x = Tensor::new(vec![n, t, 1], (0..n).flat_map(|i| vec![i as f64; t]).collect()).expect("shape");
    let edge = |i: usize, j: usize| {
        let mut a = vec![0.0; n * n];
        a[i * n + j] = 1.0;
        a[j * n + i] = 1.0;
        a
    };
    let first = TemporalGraph::new(x.clone(), vec![edge(0, 1), edge(1, 2)], false).expect("valid");
    let second = TemporalGraph::new(x, vec![edge(1, 2), edge(0, 1)], false).expect("valid");
    let expected = cells(|_, mode| match mode {
        InputMode::Implicit => Verdict::Indistinguishable,
        InputMode::Explicit => Verdict::Distinguishable,
    });
    CounterexamplePair { name: "edge-order", first, second, compare: Compare::Logit, expected }
}

/// Identical path edges, node features differing in which node sits in the middle.
pub fn build_feature_only_pair() -> (TemporalGraph, TemporalGraph) {
    let n = 3;
    let mut a = vec![0.0; n * n];
    for (i, j) in [(0, 1), (1, 2)] {
        a[i * n + j] = 1.0;
        a[j * n + i] = 1.0;
    }
    let g = |feat: [f64; 3]| {
        TemporalGraph::new(Tensor::new(vec![n, 1, 1], feat.to_vec()).expect("shape"), vec![a.clone()], false)
            .expect("valid")
    };
    (g([0.0, 1.0, 1.0]), g([1.0, 0.0, 1.0]))
}

#[derive(Clone, Debug, Serialize)]
pub struct CellReport {
    pub pair: &'static str,
    pub family: String,
    pub mode: String,
    pub expected: Verdict,
    pub observed: Verdict,
    /// Largest absolute output difference, one entry per parameter seed.
    pub differences: Vec<f64>,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct HierarchyReport {
    pub seeds: Vec<u64>,
    pub hidden: usize,
    pub cells: Vec<CellReport>,
    pub passed: bool,
}

impl HierarchyReport {
    pub fn violations(&self) -> Vec<&CellReport> {
        self.cells.iter().filter(|c| !c.passed).collect()
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<9} {:<16} {:<9} {:<18} {:<18} {:>10} {}\n",
            "pair", "family", "mode", "expected", "observed", "max_diff", "ok"
        );
        for c in &self.cells {
            let max = c.differences.iter().cloned().fold(0.0, f64::max);
            s.push_str(&format!(
                "{:<9} {:<16} {:<9} {:<18} {:<18} {:>10.3e} {}\n",
                c.pair,
                c.family,
                c.mode,
                c.expected,
                c.observed,
                max,
                if c.passed { "yes" } else { "NO" }
            ));
        }
        s
    }
}

/// Largest absolute difference between the two graphs' outputs.
pub fn output_difference(model: &Model, pair: &CounterexamplePair) -> Result<(f64, [ForwardTrace; 2])> {
    let mut outs = Vec::with_capacity(2);
    let mut traces = Vec::with_capacity(2);
    for g in [&pair.first, &pair.second] {
        let batch = model.batch(std::slice::from_ref(g))?;
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch, &ForwardOptions { trace: true, ..Default::default() })?;
        let v = match pair.compare {
            Compare::Representation => out.z,
            Compare::Logit => out.logit,
        };
        outs.push(tape.value(v).clone());
        traces.push(out.trace);
    }
    let [b, a]: [ForwardTrace; 2] = [traces.pop().expect("two"), traces.pop().expect("two")];
    Ok((outs[0].max_abs_diff(&outs[1]), [a, b]))
}

/// Every row of each `N`-row block of `t` equals the block's first row within `tol`.
pub fn rows_identical(t: &Tensor, n: usize, tol: f64) -> bool {
    let c = t.cols();
    t.data().chunks(n * c).all(|block| {
        let first = &block[..c];
        block.chunks(c).all(|row| row.iter().zip(first).all(|(a, b)| (a - b).abs() <= tol))
    })
}

fn assert_row_identity(trace: &ForwardTrace, n: usize, cell: &str) -> Result<()> {
    let mut tensors: Vec<&Tensor> = trace.gnn_in.iter().chain(&trace.states).collect();
    tensors.extend(trace.recurrent.iter().flatten());
    for t in tensors {
        if !rows_identical(t, n, IDENTICAL_TOL) {
            return Err(Error::Contract(format!("{cell}: node rows of an intermediate state differ")));
        }
    }
    Ok(())
}

pub fn classify(differences: &[f64]) -> Verdict {
    if differences.iter().all(|&d| d <= IDENTICAL_TOL) {
        return Verdict::Indistinguishable;
    }
    let separated = differences.iter().filter(|&&d| d > DISTINGUISH_TOL).count();
    // At most one seed in twenty may coincide by accident.
    if separated * 20 >= differences.len() * 19 {
        Verdict::Distinguishable
    } else {
        Verdict::Inconclusive
    }
}

/// Evaluates every (pair, family, mode) cell over randomly initialized models.
pub fn run_hierarchy_suite(seeds: &[u64], hidden: usize) -> Result<HierarchyReport> {
    if seeds.is_empty() {
        return Err(Error::Config("the suite needs at least one seed".into()));
    }
    let mut cells = Vec::new();
    for pair in [build_dyncsl_pair(), build_edge_order_pair()] {
        let n = pair.first.nodes();
        for family in Family::ALL {
            for mode in [InputMode::Implicit, InputMode::Explicit] {
                let mut cfg = ModelConfig::new(ArchKind::new(family, mode), n, pair.first.feature_dim());
                cfg.hidden = hidden;
                let label = format!("{}/{family}/{mode}", pair.name);
                let mut differences = Vec::with_capacity(seeds.len());
                for &seed in seeds {
                    let model = Model::new(cfg.clone(), seed)?;
                    let (diff, traces) = output_difference(&model, &pair)?;
                    if pair.name == "dyncsl" && family != Family::TimeThenGraph {
                        for tr in &traces {
                            assert_row_identity(tr, n, &label)?;
                        }
                    }
                    differences.push(diff);
                }
                let expected = pair.expected_for(family, mode);
                let observed = classify(&differences);
                cells.push(CellReport {
                    pair: pair.name,
                    family: family.to_string(),
                    mode: mode.to_string(),
                    expected,
                    observed,
                    differences,
                    passed: expected == observed,
                });
            }
        }
    }
    let passed = cells.iter().all(|c| c.passed);
    Ok(HierarchyReport { seeds: seeds.to_vec(), hidden, cells, passed })
}
