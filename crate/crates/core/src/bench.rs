use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::architectures::{bce_loss, ArchKind, Family, ForwardOptions, InputMode, Model, ModelConfig};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::graphgen::{build_dynamic, TemporalGraph, DEFAULT_TAU};
use crate::tensor::Tensor;

pub const DEFAULT_REPEATS: usize = 9;
pub const DEFAULT_WARMUPS: usize = 3;
const MIN_REPEATS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub steps: Vec<usize>,
    pub families: Vec<Family>,
    pub nodes: usize,
    pub features: usize,
    pub hidden: usize,
    pub tau: usize,
    pub repeats: usize,
    pub warmups: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            steps: vec![12, 24, 36, 48, 60],
            families: Family::ALL.to_vec(),
            nodes: 19,
            features: 8,
            hidden: 64,
            tau: DEFAULT_TAU,
            repeats: DEFAULT_REPEATS,
            warmups: DEFAULT_WARMUPS,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats < MIN_REPEATS {
            return Err(Error::Config(format!("repeats must be at least {MIN_REPEATS}, got {}", self.repeats)));
        }
        if self.steps.is_empty() || self.families.is_empty() {
            return Err(Error::Config("bench grid is empty".into()));
        }
        if self.steps.contains(&0) || self.nodes < 2 || self.features == 0 || self.hidden == 0 {
            return Err(Error::Config("bench dimensions must be positive (nodes >= 2)".into()));
        }
        if self.tau == 0 || self.tau >= self.nodes {
            return Err(Error::Config(format!("tau must lie in 1..{}, got {}", self.nodes, self.tau)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub family: Family,
    pub steps: usize,
    pub nodes: usize,
    pub median_forward_s: f64,
    pub median_train_step_s: f64,
    /// Σ_t E_t over directed edges.
    pub step_edges: usize,
    pub aggregated_edges: usize,
    pub predicted_flops: u64,
}

/// Dominant-term operation count of one forward pass.
///
/// `step_edges` is Σ_t E_t and `aggregated_edges` is E_agg.
pub fn count_flops(family: Family, nodes: usize, steps: usize, step_edges: usize, aggregated_edges: usize, d: usize) -> u64 {
    let (v, t, d) = (nodes as u64, steps as u64, d as u64);
    let (e, agg) = (step_edges as u64, aggregated_edges as u64);
    match family {
        Family::GraphThenTime => v * t * d * d + e * d,
        Family::TimeAndGraph => v * t * d * d + e * d * d,
        Family::TimeThenGraph => (v + agg) * t * d * d,
    }
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape("spearman", &[x.len()], &[y.len()]));
    }
    if x.len() < 2 || x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::UndefinedMetric("spearman needs at least two finite pairs".into()));
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mean) * (b - mean);
        sxx += (a - mean) * (a - mean);
        syy += (b - mean) * (b - mean);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedMetric("spearman of a constant sequence".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Smallest nonzero step observed on the monotonic clock.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..64 {
        let start = Instant::now();
        let mut now = Instant::now();
        while now == start {
            now = Instant::now();
        }
        best = best.min(now - start);
    }
    best
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

fn time_median(warmups: usize, repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    for _ in 0..warmups {
        f()?;
    }
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        f()?;
        samples.push(start.elapsed().as_secs_f64());
    }
    Ok(median(samples))
}

/// Seeded random features of shape `N x T x d` and their dynamic graph.
pub fn bench_graph(cfg: &BenchConfig, steps: usize) -> Result<TemporalGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (steps as u64) << 20);
    let len = cfg.nodes * steps * cfg.features;
    let data: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
    build_dynamic(&Tensor::new(vec![cfg.nodes, steps, cfg.features], data)?, cfg.tau)
}

pub fn bench_point(cfg: &BenchConfig, family: Family, graph: &TemporalGraph) -> Result<BenchPoint> {
    let mut mcfg = ModelConfig::new(ArchKind::new(family, InputMode::Explicit), cfg.nodes, cfg.features);
    mcfg.hidden = cfg.hidden;
    let model = Model::new(mcfg, cfg.seed)?;
    let batch = model.batch(std::slice::from_ref(graph))?;
    let opts = ForwardOptions::default();
    let median_forward_s = time_median(cfg.warmups, cfg.repeats, || {
        let mut tape = Tape::new();
        model.forward(&mut tape, &batch, &opts)?;
        Ok(())
    })?;
    let median_train_step_s = time_median(cfg.warmups, cfg.repeats, || {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch, &opts)?;
        let loss = bce_loss(&mut tape, out.prob, &[1])?;
        tape.backward(loss)?;
        Ok(())
    })?;
    let steps = graph.steps();
    let step_edges: usize = (0..steps).map(|t| graph.edge_count(t)).sum();
    let aggregated_edges = graph.aggregated_edges().len();
    Ok(BenchPoint {
        family,
        steps,
        nodes: cfg.nodes,
        median_forward_s,
        median_train_step_s,
        step_edges,
        aggregated_edges,
        predicted_flops: count_flops(family, cfg.nodes, steps, step_edges, aggregated_edges, cfg.hidden),
    })
}

/// Points ordered by `steps`, then by `families`.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchPoint>> {
    cfg.validate()?;
    let res = timer_resolution();
    if res > Duration::from_micros(1) {
        return Err(Error::Bench(format!("timer resolution {res:?} is coarser than 1us")));
    }
    let mut out = Vec::with_capacity(cfg.steps.len() * cfg.families.len());
    for &steps in &cfg.steps {
        let graph = bench_graph(cfg, steps)?;
        for &family in &cfg.families {
            let p = bench_point(cfg, family, &graph)?;
            log::info!(
                "bench {family} T={steps}: forward {:.3e}s train step {:.3e}s",
                p.median_forward_s,
                p.median_train_step_s
            );
            out.push(p);
        }
    }
    Ok(out)
}

pub fn to_csv(points: &[BenchPoint]) -> String {
    let mut s = String::from("family,T,N,median_forward_s,median_train_step_s,predicted_flops\n");
    for p in points {
        s.push_str(&format!(
            "{},{},{},{:e},{:e},{}\n",
            p.family, p.steps, p.nodes, p.median_forward_s, p.median_train_step_s, p.predicted_flops
        ));
    }
    s
}

/// Train-step time of `num` over `den` at each `T` present for both.
pub fn ratio_by_steps(points: &[BenchPoint], num: Family, den: Family) -> Vec<(usize, f64)> {
    points
        .iter()
        .filter(|p| p.family == num)
        .filter_map(|a| {
            points
                .iter()
                .find(|b| b.family == den && b.steps == a.steps)
                .map(|b| (a.steps, a.median_train_step_s / b.median_train_step_s))
        })
        .collect()
}

/// Spearman correlation of measured train-step times with predictions across all points.
pub fn flops_correlation(points: &[BenchPoint]) -> Result<f64> {
    let t: Vec<f64> = points.iter().map(|p| p.median_train_step_s).collect();
    let f: Vec<f64> = points.iter().map(|p| p.predicted_flops as f64).collect();
    spearman(&t, &f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn count_flops_time_then_graph_substitution() {
        assert_eq!(count_flops(Family::TimeThenGraph, 8, 10, 0, 16, 4), 3840);
    }

    #[test]
    fn count_flops_constant_graph_orders_time_then_graph_first() {
        // A constant graph with E edges per step has E_agg = E.
        for &(v, t, e, d) in &[(8, 10, 16, 4), (19, 12, 57, 64), (4, 1, 6, 2)] {
            let ttg = count_flops(Family::TimeThenGraph, v, t, e * t, e, d);
            let tag = count_flops(Family::TimeAndGraph, v, t, e * t, e, d);
            assert!(ttg <= tag, "{ttg} > {tag}");
        }
    }

    #[test]
    fn spearman_reference_values() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert!((spearman(&x, &[2.0, 4.0, 6.0, 8.0, 10.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&x, &[5.0, 4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        // 1 - 6 Σd² / (n(n²-1)) with d = (0,0,-1,1,0).
        let rho = spearman(&x, &[1.0, 2.0, 4.0, 3.0, 5.0]).unwrap();
        assert!((rho - 0.9).abs() < 1e-15);
        assert!(spearman(&x, &[1.0; 5]).is_err());
        assert!(spearman(&x, &[1.0; 4]).is_err());
    }

    #[test]
    fn average_ranks_share_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn timer_is_fine_grained() {
        assert!(timer_resolution() <= Duration::from_micros(1));
    }

    #[test]
    fn config_rejects_too_few_repeats() {
        let cfg = BenchConfig { repeats: 4, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn small_grid_runs_and_formats() {
        let cfg = BenchConfig { steps: vec![1, 2], nodes: 5, features: 2, hidden: 3, tau: 2, repeats: 5, warmups: 1, ..Default::default() };
        let pts = run_bench(&cfg).unwrap();
        assert_eq!(pts.len(), 6);
        assert!(pts.iter().all(|p| p.median_forward_s > 0.0 && p.median_train_step_s > 0.0));
        assert_eq!(pts[0].step_edges, 10);
        let csv = to_csv(&pts);
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.starts_with("family,T,N,median_forward_s,median_train_step_s,predicted_flops\n"));
        assert_eq!(ratio_by_steps(&pts, Family::TimeAndGraph, Family::TimeThenGraph).len(), 2);
    }

    #[test]
    fn workload_is_deterministic() {
        let cfg = BenchConfig::default();
        let a = bench_graph(&cfg, 12).unwrap();
        let b = bench_graph(&cfg, 12).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn spearman_is_invariant_under_monotone_maps(v in proptest::collection::vec(-1e3f64..1e3, 3..30)) {
            let w: Vec<f64> = v.iter().map(|x| x.powi(3) + 2.0 * x).collect();
            let distinct = { let mut s = v.clone(); s.sort_by(f64::total_cmp); s.dedup(); s.len() > 1 };
            prop_assume!(distinct);
            prop_assert!((spearman(&v, &w).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn flops_grow_linearly_in_steps(v in 2usize..40, t in 1usize..30, e in 1usize..50, d in 1usize..64) {
            for fam in [Family::GraphThenTime, Family::TimeAndGraph, Family::TimeThenGraph] {
                let one = count_flops(fam, v, t, e * t, e, d);
                let two = count_flops(fam, v, 2 * t, 2 * e * t, e, d);
                prop_assert_eq!(two, 2 * one);
            }
        }
    }
}
