//! One PASS/FAIL line per acceptance criterion.
//!
//! Criteria listed in `KNOWN_RED` are expected to fail on this hardware and
//! are reported without failing the run; any other failure exits nonzero.
//! `EVOBRAIN_ACCEPTANCE_FULL=1` runs the learning criteria at full scale and
//! `EVOBRAIN_ACCEPTANCE_ONLY=2,10` restricts the run to the listed criteria.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use evobrain::architectures::{
    bce_loss, ArchKind, Checkpoint, Family, ForwardOptions, InputMode, Model, ModelConfig,
};
use evobrain::autodiff::{ParamStore, SparsePattern, Tape, Var};
use evobrain::bench::{flops_correlation, ratio_by_steps, run_bench, BenchConfig};
use evobrain::expressivity::run_hierarchy_suite;
use evobrain::graphgen::{build_dynamic, TemporalGraph};
use evobrain::sequence::CellKind;
use evobrain::signal::{synth_split, Dataset, Split, SynthConfig};
use evobrain::spatial::{normalized_laplacian, sym_eig};
use evobrain::training::{auroc, f1_best_threshold, run_seeds, TrainConfig};
use evobrain::Tensor;

const KNOWN_RED: &[usize] = &[6, 7, 8];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome, String> {
    Ok(Outcome { pass, detail: detail.into() })
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// Criterion 1.

fn expressivity() -> Result<Outcome, String> {
    let start = Instant::now();
    let seeds: Vec<u64> = (1..=20).collect();
    let report = run_hierarchy_suite(&seeds, 8).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    let bad = report.violations().len();
    outcome(
        bad == 0 && secs < 10.0,
        format!("{} verdict cells, {bad} violations, {secs:.2}s (limit 10s)", report.cells.len()),
    )
}

// Criterion 2.

type Build = dyn Fn(&mut Tape, &[Var]) -> evobrain::Result<Var>;

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn eval_build(inputs: &[Tensor], build: &Build) -> evobrain::Result<(f64, Vec<Tensor>)> {
    let mut store = ParamStore::new();
    for (i, t) in inputs.iter().enumerate() {
        store.register(format!("x{i}"), t.clone())?;
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = (0..inputs.len()).map(|i| tape.param(&store, i)).collect();
    let out = build(&mut tape, &vars)?;
    let value = tape.value(out).item();
    let grads = tape.backward(out)?.into_param_grads(&store);
    Ok((value, grads))
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn fd_error(inputs: &[Tensor], build: &Build) -> evobrain::Result<f64> {
    let (_, grads) = eval_build(inputs, build)?;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        for k in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= h;
            let numeric = (eval_build(&plus, build)?.0 - eval_build(&minus, build)?.0) / (2.0 * h);
            worst = worst.max(rel_err(grads[i].data()[k], numeric));
        }
    }
    Ok(worst)
}

fn weighted_sum(tape: &mut Tape, v: Var) -> evobrain::Result<Var> {
    let shape = tape.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w = tape.constant(Tensor::new(shape, (0..n).map(|i| 0.3 + 0.17 * i as f64).collect())?);
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor>, Box<Build>)> {
    let a = random(&[3, 4], rng, -2.0, 2.0);
    let b = random(&[3, 4], rng, -2.0, 2.0);
    let pos = random(&[3, 4], rng, 0.5, 3.0);
    let x = random(&[4, 3], rng, -1.0, 1.0);
    let w = random(&[3, 2], rng, -1.0, 1.0);
    let bias = random(&[1, 3], rng, -1.0, 1.0);
    let col = random(&[4, 1], rng, -1.0, 1.0);
    let vals = random(&[6, 1], rng, -1.0, 1.0);
    let f = random(&[6, 2], rng, -0.9, 0.9);
    let u = random(&[6, 2], rng, -1.0, 1.0);
    let h0 = random(&[2, 2], rng, -1.0, 1.0);
    let proj = random(&[6, 7], rng, -2.0, 2.0);
    let ld = random(&[1, 2], rng, -1.5, 0.0);
    let pattern = Arc::new(SparsePattern::new(3, 4, vec![0, 0, 1, 2, 2, 2], vec![0, 3, 1, 2, 2, 0]).unwrap());
    let idx = Arc::new(vec![2, 0, 2, 3, 1]);
    let dst = Arc::new(vec![1, 1, 0, 2]);
    let one = |t: &Tensor| vec![t.clone()];
    let two = |p: &Tensor, q: &Tensor| vec![p.clone(), q.clone()];
    vec![
        ("relu", one(&a), Box::new(|t: &mut Tape, v: &[Var]| { let y = t.relu(v[0])?; weighted_sum(t, y) })),
        ("sigmoid", one(&a), Box::new(|t: &mut Tape, v: &[Var]| { let y = t.sigmoid(v[0])?; weighted_sum(t, y) })),
        ("softplus", one(&a), Box::new(|t: &mut Tape, v: &[Var]| { let y = t.softplus(v[0])?; weighted_sum(t, y) })),
        ("tanh", one(&a), Box::new(|t: &mut Tape, v: &[Var]| { let y = t.tanh(v[0])?; weighted_sum(t, y) })),
        ("exp", one(&a), Box::new(|t: &mut Tape, v: &[Var]| { let y = t.exp(v[0])?; weighted_sum(t, y) })),
        ("log", one(&pos), Box::new(|t: &mut Tape, v: &[Var]| { let y = t.log(v[0])?; weighted_sum(t, y) })),
        ("powf", one(&pos), Box::new(|t: &mut Tape, v: &[Var]| { let y = t.powf(v[0], -0.5)?; weighted_sum(t, y) })),
        ("scale", one(&a), Box::new(|t: &mut Tape, v: &[Var]| { let y = t.scale(v[0], -1.7)?; weighted_sum(t, y) })),
        ("shift", one(&a), Box::new(|t: &mut Tape, v: &[Var]| { let y = t.shift(v[0], 0.4)?; weighted_sum(t, y) })),
        ("clamp", one(&a), Box::new(|t: &mut Tape, v: &[Var]| { let y = t.clamp(v[0], -1.0, 1.0)?; weighted_sum(t, y) })),
        ("transpose", one(&a), Box::new(|t: &mut Tape, v: &[Var]| { let y = t.transpose(v[0])?; weighted_sum(t, y) })),
        ("reshape", one(&a), Box::new(|t: &mut Tape, v: &[Var]| { let y = t.reshape(v[0], &[2, 6])?; weighted_sum(t, y) })),
        ("slice_rows", one(&a), Box::new(|t: &mut Tape, v: &[Var]| { let y = t.slice_rows(v[0], 1, 3)?; weighted_sum(t, y) })),
        ("slice_cols", one(&a), Box::new(|t: &mut Tape, v: &[Var]| { let y = t.slice_cols(v[0], 1, 3)?; weighted_sum(t, y) })),
        ("sum", one(&a), Box::new(|t: &mut Tape, v: &[Var]| { let y = t.mul(v[0], v[0])?; t.sum(y) })),
        ("mean", one(&a), Box::new(|t: &mut Tape, v: &[Var]| { let y = t.mul(v[0], v[0])?; t.mean(y) })),
        ("max", one(&a), Box::new(|t: &mut Tape, v: &[Var]| t.max(v[0]))),
        ("segment_sum", one(&a), Box::new(|t: &mut Tape, v: &[Var]| { let y = t.segment_sum(v[0], 3)?; weighted_sum(t, y) })),
        ("segment_mean", one(&a), Box::new(|t: &mut Tape, v: &[Var]| { let y = t.segment_mean(v[0], 3)?; weighted_sum(t, y) })),
        ("segment_max", one(&a), Box::new(|t: &mut Tape, v: &[Var]| { let y = t.segment_max(v[0], 3)?; weighted_sum(t, y) })),
        ("add", two(&a, &b), Box::new(|t: &mut Tape, v: &[Var]| { let y = t.add(v[0], v[1])?; weighted_sum(t, y) })),
        ("sub", two(&a, &b), Box::new(|t: &mut Tape, v: &[Var]| { let y = t.sub(v[0], v[1])?; weighted_sum(t, y) })),
        ("mul", two(&a, &b), Box::new(|t: &mut Tape, v: &[Var]| { let y = t.mul(v[0], v[1])?; weighted_sum(t, y) })),
        ("concat_cols", two(&a, &b), Box::new(|t: &mut Tape, v: &[Var]| { let y = t.concat_cols(&[v[0], v[1]])?; weighted_sum(t, y) })),
        ("concat_rows", two(&a, &b), Box::new(|t: &mut Tape, v: &[Var]| { let y = t.concat_rows(&[v[0], v[1]])?; weighted_sum(t, y) })),
        ("matmul", two(&x, &w), Box::new(|t: &mut Tape, v: &[Var]| { let y = t.matmul(v[0], v[1])?; weighted_sum(t, y) })),
        ("affine", vec![x.clone(), w.clone(), random(&[1, 2], rng, -1.0, 1.0)], Box::new(|t: &mut Tape, v: &[Var]| { let y = t.affine(v[0], v[1], v[2])?; weighted_sum(t, y) })),
        ("add_row_bias", two(&x, &bias), Box::new(|t: &mut Tape, v: &[Var]| { let y = t.add_row_bias(v[0], v[1])?; let y = t.mul(y, y)?; weighted_sum(t, y) })),
        ("scale_rows", two(&x, &col), Box::new(|t: &mut Tape, v: &[Var]| { let y = t.scale_rows(v[0], v[1])?; weighted_sum(t, y) })),
        ("gather_rows", one(&x), Box::new(move |t: &mut Tape, v: &[Var]| { let y = t.gather_rows(v[0], idx.clone())?; weighted_sum(t, y) })),
        ("scatter_add_rows", one(&x), Box::new(move |t: &mut Tape, v: &[Var]| { let y = t.scatter_add_rows(v[0], dst.clone(), 3)?; weighted_sum(t, y) })),
        ("spmm", two(&vals, &x), Box::new(move |t: &mut Tape, v: &[Var]| { let y = t.spmm(v[0], v[1], pattern.clone())?; weighted_sum(t, y) })),
        ("linear_recurrence", vec![f, u, h0.clone()], Box::new(|t: &mut Tape, v: &[Var]| { let y = t.linear_recurrence(v[0], v[1], v[2], 3)?; weighted_sum(t, y) })),
        ("ssm_scan", vec![proj, ld, h0], Box::new(|t: &mut Tape, v: &[Var]| { let y = t.ssm_scan(v[0], v[1], v[2], 3)?; weighted_sum(t, y) })),
    ]
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize, t: usize, d: usize) -> TemporalGraph {
    let x = random(&[n, t, d], rng, -1.0, 1.0);
    let adj = (0..t)
        .map(|_| {
            (0..n * n)
                .map(|k| if k / n != k % n && rng.random_bool(0.5) { rng.random_range(0.1..1.0) } else { 0.0 })
                .collect()
        })
        .collect();
    TemporalGraph::new(x, adj, true).unwrap()
}

fn model_loss(model: &Model, graphs: &[TemporalGraph], labels: &[u8], opts: &ForwardOptions) -> evobrain::Result<(f64, Vec<Tensor>)> {
    let batch = model.batch(graphs)?;
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &batch, opts)?;
    let loss = bce_loss(&mut tape, out.prob, labels)?;
    let value = tape.value(loss).item();
    Ok((value, tape.backward(loss)?.into_param_grads(&model.store)))
}

fn model_fd_error(arch: ArchKind, seed: u64) -> evobrain::Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = ModelConfig::new(arch, 4, 2);
    cfg.hidden = 3;
    cfg.k = 2;
    let model = Model::new(cfg, seed)?;
    let graphs: Vec<_> = (0..2).map(|_| random_graph(&mut rng, 4, 3, 2)).collect();
    let labels = [1u8, 0];
    let mut tape = Tape::new();
    let traced = model.forward(&mut tape, &model.batch(&graphs)?, &ForwardOptions { trace: true, ..Default::default() })?;
    let opts = ForwardOptions { positions: traced.trace.positions, ..Default::default() };
    let (_, grads) = model_loss(&model, &graphs, &labels, &opts)?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (id, g) in grads.iter().enumerate() {
        for k in 0..g.len() {
            let mut plus = model.clone();
            plus.store.get_mut(id).value.data_mut()[k] += h;
            let mut minus = model.clone();
            minus.store.get_mut(id).value.data_mut()[k] -= h;
            let numeric = (model_loss(&plus, &graphs, &labels, &opts)?.0 - model_loss(&minus, &graphs, &labels, &opts)?.0) / (2.0 * h);
            worst = worst.max(rel_err(g.data()[k], numeric));
        }
    }
    Ok(worst)
}

fn gradients() -> Result<Outcome, String> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_op = (0.0f64, "");
    for (name, inputs, build) in op_cases(&mut rng) {
        let e = fd_error(&inputs, build.as_ref()).map_err(err)?;
        if e > worst_op.0 {
            worst_op = (e, name);
        }
    }
    let mut worst_model = (0.0f64, String::new());
    let mut seed = 7;
    for family in Family::ALL {
        for mode in [InputMode::Explicit, InputMode::Implicit] {
            for cell in [CellKind::Ssm, CellKind::Gru] {
                let arch = ArchKind { family, mode, cell, pe: true };
                let e = model_fd_error(arch, seed).map_err(err)?;
                seed += 1;
                if e >= worst_model.0 {
                    worst_model = (e, arch.to_string());
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst_op.0 < 1e-6 && worst_model.0 < 1e-4 && secs < 60.0,
        format!(
            "primitives max rel err {:.1e} ({}), architectures max rel err {:.1e} ({}), {secs:.1}s",
            worst_op.0, worst_op.1, worst_model.0, worst_model.1
        ),
    )
}

// Criterion 3.

fn connected(adj: &[f64], n: usize) -> bool {
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for j in 0..n {
            if adj[i * n + j] > 0.0 && !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

fn spectral() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut range, mut resid, mut ortho, mut kernel) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut kernels = 0;
    for case in 0..1000 {
        let n = rng.random_range(2..=12);
        let density = rng.random_range(0.2..1.0);
        let mut adj = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                if rng.random_bool(density) {
                    let w = rng.random_range(0.1..1.0);
                    adj[i * n + j] = w;
                    adj[j * n + i] = w;
                }
            }
        }
        let loops = case % 2 == 0;
        let isolated = (0..n).any(|i| adj[i * n..(i + 1) * n].iter().all(|&w| w == 0.0));
        if !loops && isolated {
            continue;
        }
        let l = normalized_laplacian(&adj, n, loops).map_err(err)?;
        let eig = sym_eig(&l, n).map_err(err)?;
        let v = eig.vectors.data();
        for (k, &lam) in eig.values.iter().enumerate() {
            range = range.max((-1e-9 - lam).max(lam - 2.0 - 1e-9).max(0.0));
            for i in 0..n {
                let lv: f64 = (0..n).map(|j| l[i * n + j] * v[j * n + k]).sum();
                resid = resid.max((lv - lam * v[i * n + k]).abs());
            }
            for m in 0..n {
                let dot: f64 = (0..n).map(|i| v[i * n + k] * v[i * n + m]).sum();
                ortho = ortho.max((dot - if k == m { 1.0 } else { 0.0 }).abs());
            }
        }
        if connected(&adj, n) {
            kernels += 1;
            let deg: Vec<f64> = (0..n).map(|i| adj[i * n..(i + 1) * n].iter().sum::<f64>() + if loops { 1.0 } else { 0.0 }).collect();
            let norm = deg.iter().sum::<f64>().sqrt();
            let u: Vec<f64> = deg.iter().map(|d| d.sqrt() / norm).collect();
            let sign = if (0..n).map(|i| u[i] * v[i * n]).sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
            for i in 0..n {
                kernel = kernel.max((sign * v[i * n] - u[i]).abs());
            }
        }
    }
    let pass = range == 0.0 && resid < 1e-8 && ortho < 1e-8 && kernel < 1e-8;
    outcome(
        pass,
        format!("1000 adjacencies: range excess {range:.1e}, residual {resid:.1e}, orthonormality {ortho:.1e}, kernel {kernel:.1e} over {kernels} connected"),
    )
}

// Criterion 4.

fn oracle_weight(a: &[f64], b: &[f64]) -> f64 {
    let z = |x: &[f64]| -> Option<Vec<f64>> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if var == 0.0 || var <= (1e-12 * scale).powi(2) {
            None
        } else {
            Some(x.iter().map(|v| (v - mean) / var.sqrt()).collect())
        }
    };
    match (z(a), z(b)) {
        (Some(p), Some(q)) => (p.iter().zip(&q).map(|(x, y)| x * y).sum::<f64>().abs() / a.len() as f64).min(1.0),
        _ => 0.0,
    }
}

fn oracle_dynamic(x: &Tensor, tau: usize) -> Vec<Vec<f64>> {
    let (n, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let row = |i: usize, s: usize| &x.data()[(i * t + s) * d..(i * t + s + 1) * d];
    (0..t)
        .map(|s| {
            let mut adj = vec![0.0; n * n];
            for i in 0..n {
                let mut all: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (oracle_weight(row(i, s), row(j, s)), j)).collect();
                // Exhaustive insertion sort: weight descending, then index ascending.
                for a in 1..all.len() {
                    let mut b = a;
                    while b > 0 && (all[b].0 > all[b - 1].0 || (all[b].0 == all[b - 1].0 && all[b].1 < all[b - 1].1)) {
                        all.swap(b, b - 1);
                        b -= 1;
                    }
                }
                for &(w, j) in &all[..tau] {
                    adj[i * n + j] = w;
                }
            }
            adj
        })
        .collect()
}

fn graph_oracle() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    for case in 0..100 {
        let n = rng.random_range(3..=8);
        let t = rng.random_range(1..=4);
        let d = rng.random_range(2..=6);
        let tau = rng.random_range(1..n);
        let mut x = random(&[n, t, d], &mut rng, -1.0, 1.0);
        // Force ties: duplicated channels and constant snapshots.
        if case % 3 == 0 {
            let (src, dst) = (0, n - 1);
            let data = x.data_mut();
            for k in 0..t * d {
                data[dst * t * d + k] = data[src * t * d + k];
            }
        }
        if case % 4 == 0 {
            let data = x.data_mut();
            for k in 0..d {
                data[k] = 0.5;
            }
        }
        let tg = build_dynamic(&x, tau).map_err(err)?;
        let expected = oracle_dynamic(&x, tau);
        let got: Vec<Vec<f64>> = (0..t).map(|s| (0..n * n).map(|k| tg.weight(k / n, k % n, s)).collect()).collect();
        if got != expected {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("100 random inputs with forced ties, {mismatches} mismatches"))
}

// Criterion 5.

fn auroc_oracle(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1;
                twice += if si > sj { 2 } else if si == sj { 1 } else { 0 };
            }
        }
    }
    twice as f64 / (2 * pairs) as f64
}

fn f1_oracle(scores: &[f64], labels: &[u8]) -> (f64, f64) {
    let mut unique = scores.to_vec();
    unique.sort_by(f64::total_cmp);
    unique.dedup();
    let mut thresholds = vec![unique[0] - 1.0];
    for w in unique.windows(2) {
        thresholds.push(w[0] + (w[1] - w[0]) / 2.0);
    }
    let mut best: Option<(f64, f64)> = None;
    for &th in &thresholds {
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for (&s, &l) in scores.iter().zip(labels) {
            match (s > th, l == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        let f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
        best = match best {
            Some((bf, bt)) if bf > f1 || (bf == f1 && bt < th) => Some((bf, bt)),
            _ => Some((f1, th)),
        };
    }
    best.unwrap()
}

fn metric_oracles() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut auroc_bad, mut f1_bad, mut sets) = (0, 0, 0);
    while sets < 500 {
        let n = rng.random_range(2..60);
        let labels: Vec<u8> = (0..n).map(|_| rng.random_bool(0.4) as u8).collect();
        if labels.iter().all(|&l| l == labels[0]) {
            continue;
        }
        let coarse = sets % 2 == 0;
        let scores: Vec<f64> = (0..n)
            .map(|_| if coarse { rng.random_range(0..8) as f64 / 8.0 } else { rng.random_range(-3.0..3.0) })
            .collect();
        sets += 1;
        if auroc(&scores, &labels).map_err(err)? != auroc_oracle(&scores, &labels) {
            auroc_bad += 1;
        }
        if f1_best_threshold(&scores, &labels).map_err(err)? != f1_oracle(&scores, &labels) {
            f1_bad += 1;
        }
    }
    outcome(
        auroc_bad == 0 && f1_bad == 0,
        format!("500 sets (half with ties): auroc mismatches {auroc_bad}, f1/threshold mismatches {f1_bad}"),
    )
}

// Criteria 6 and 7.

struct Protocol {
    train: usize,
    val: usize,
    test: usize,
    epochs: usize,
    hidden: usize,
    lr: f64,
    full: bool,
}

impl Protocol {
    fn from_env() -> Protocol {
        if std::env::var("EVOBRAIN_ACCEPTANCE_FULL").is_ok_and(|v| v == "1") {
            Protocol { train: 2000, val: 500, test: 500, epochs: 100, hidden: 64, lr: 1e-4, full: true }
        } else {
            Protocol { train: 256, val: 128, test: 500, epochs: 8, hidden: 8, lr: 1e-3, full: false }
        }
    }

    fn describe(&self) -> String {
        format!(
            "{} protocol: {} train / {} val / {} test, {} epochs, h={}, lr={}",
            if self.full { "full" } else { "desk" },
            self.train,
            self.val,
            self.test,
            self.epochs,
            self.hidden,
            self.lr
        )
    }
}

struct LearningRuns {
    auroc: HashMap<(Family, InputMode), f64>,
    seconds: HashMap<(Family, InputMode), f64>,
}

fn learning_runs(p: &Protocol) -> evobrain::Result<LearningRuns> {
    let synth = SynthConfig::default();
    let train = synth_split(&synth, 0, Split::Train, p.train)?;
    let val = synth_split(&synth, 0, Split::Val, p.val)?;
    let test = synth_split(&synth, 0, Split::Test, p.test)?;
    let seeds: Vec<u64> = (0..5).collect();
    let mut runs = LearningRuns { auroc: HashMap::new(), seconds: HashMap::new() };
    for mode in [InputMode::Explicit, InputMode::Implicit] {
        for family in Family::ALL {
            let cfg = TrainConfig {
                epochs: p.epochs,
                hidden: p.hidden,
                lr: p.lr,
                arch: ArchKind::new(family, mode),
                ..Default::default()
            };
            let start = Instant::now();
            let report = run_seeds(&cfg, &seeds, &train, &val, &test)?;
            let secs = start.elapsed().as_secs_f64();
            println!(
                "    {:<16} {:<8} auroc {:.4} ± {:.4}  f1 {:.4} ± {:.4}  ({secs:.0}s)",
                family, mode, report.auroc_mean, report.auroc_std, report.f1_mean, report.f1_std
            );
            runs.auroc.insert((family, mode), report.auroc_mean);
            runs.seconds.insert((family, mode), secs);
        }
    }
    Ok(runs)
}

fn learning(p: &Protocol, runs: &LearningRuns) -> Result<Outcome, String> {
    let a = |f| runs.auroc[&(f, InputMode::Explicit)];
    let (ttg, tag, gtt) = (a(Family::TimeThenGraph), a(Family::TimeAndGraph), a(Family::GraphThenTime));
    let ordered = ttg - tag >= -0.02 && tag - gtt >= -0.02;
    let explicit_secs: f64 = Family::ALL.iter().map(|&f| runs.seconds[&(f, InputMode::Explicit)]).sum();
    // Full protocol cost extrapolated linearly in samples times epochs.
    let scale = (100.0 * 2500.0) / (p.epochs as f64 * (p.train + p.val) as f64);
    let minutes = if p.full { explicit_secs / 60.0 } else { explicit_secs * scale / 60.0 };
    let learned = ttg >= 0.90 && ordered;
    outcome(
        p.full && learned && minutes < 30.0,
        format!(
            "{}; EvoBrain {ttg:.4}, time-and-graph {tag:.4}, graph-then-time {gtt:.4}, ordering {}; full protocol {} {minutes:.0} min (limit 30)",
            p.describe(),
            if ordered { "holds" } else { "violated" },
            if p.full { "took" } else { "extrapolates to" }
        ),
    )
}

fn ablation(p: &Protocol, runs: &LearningRuns) -> Result<Outcome, String> {
    let mut parts = Vec::new();
    let mut pass = true;
    for family in Family::ALL {
        let e = runs.auroc[&(family, InputMode::Explicit)];
        let s = runs.auroc[&(family, InputMode::Implicit)];
        pass &= e >= s - 0.02;
        if family == Family::TimeThenGraph {
            pass &= e > s;
        }
        parts.push(format!("{family} explicit {e:.4} vs static {s:.4}"));
    }
    outcome(pass, format!("{}; {}", p.describe(), parts.join(", ")))
}

// Criterion 8.

fn complexity() -> Result<Outcome, String> {
    let cfg = BenchConfig::default();
    let points = run_bench(&cfg).map_err(err)?;
    let ratios = ratio_by_steps(&points, Family::TimeAndGraph, Family::TimeThenGraph);
    let rho = flops_correlation(&points).map_err(err)?;
    let r12 = ratios.iter().find(|r| r.0 == 12).map(|r| r.1).ok_or("no T=12 point")?;
    let r60 = ratios.iter().find(|r| r.0 == 60).map(|r| r.1).ok_or("no T=60 point")?;
    let listed: Vec<String> = ratios.iter().map(|(t, r)| format!("T={t}: {r:.3}")).collect();
    outcome(
        r60 > r12 && r60 > 2.0 && rho > 0.8,
        format!("time-and-graph / time-then-graph train-step ratio {}; spearman {rho:.3}", listed.join(", ")),
    )
}

// Criterion 9.

fn ssm_run(proj: Vec<f64>, h: usize, log_decay: Vec<f64>, init: Vec<f64>, steps: usize) -> evobrain::Result<Vec<f64>> {
    let rows = proj.len() / (1 + 3 * h);
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::matrix(rows, 1 + 3 * h, proj)?);
    let l = tape.constant(Tensor::matrix(1, h, log_decay)?);
    let i = tape.constant(Tensor::matrix(rows / steps, h, init)?);
    let out = tape.ssm_scan(p, l, i, steps)?;
    Ok(tape.value(out).data().to_vec())
}

fn mamba() -> Result<Outcome, String> {
    // Columns per row: [Δ pre-activation | B | C | E] with h = 1; output row is [y | state].
    let frozen = ssm_run(vec![-800.0, 3.0, 1.0, 2.0, -800.0, -1.0, 1.0, 5.0], 1, vec![0.0], vec![1.7], 2).map_err(err)?;
    let freezes = frozen[1] == 1.7 && frozen[3] == 1.7;
    // softplus(40) rounds to 40, so Δ·D = 40 · (1/40) = 1 and the state is overwritten.
    let erase = ssm_run(vec![40.0, 0.5, 1.0, 0.25], 1, vec![(1.0f64 / 40.0).ln()], vec![123.0], 1).map_err(err)?;
    let erases = erase[1] == 40.0 * 0.5 * 0.25;
    let pre = (std::f64::consts::E - 1.0).ln();
    let hand = ssm_run(vec![pre, 2.0, 1.0, 1.0, pre, 3.0, 1.0, 1.0], 1, vec![0.5f64.ln()], vec![0.0], 2).map_err(err)?;
    let (h1, h2, y2) = (hand[1], hand[3], hand[2]);
    let recurrence = (h1 - 2.0).abs() < 1e-12 && (h2 - 4.0).abs() < 1e-12 && (y2 - 4.0).abs() < 1e-12;
    outcome(
        freezes && erases && recurrence,
        format!("freeze {freezes}, erase {erases}, hand recurrence h1={h1} h2={h2} y2={y2}"),
    )
}

// Criterion 10.

fn run_bin(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_evobrain"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(err)?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out.stdout)
}

fn files(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(err)? {
        let entry = entry.map_err(err)?;
        out.insert(entry.file_name().to_string_lossy().into_owned(), std::fs::read(entry.path()).map_err(err)?);
    }
    Ok(out)
}

fn reproducibility() -> Result<Outcome, String> {
    let tmp = tempfile::tempdir().map_err(err)?;
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "synth.channels=8\nsynth.duration_s=4\nsynth.sample_rate=16\nsynth.focal=0,1,2\nsynth.min_seizure_s=1\nsynth.max_seizure_s=3\n\
         data.train_count=24\ndata.val_count=12\ndata.test_count=12\ntrain.epochs=2\ntrain.hidden=4\ntrain.k=3\ntrain.tau=2\n",
    )
    .map_err(err)?;
    let c = cfg.to_str().unwrap();
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let dir = tmp.path().join(name);
        std::fs::create_dir_all(&dir).map_err(err)?;
        let d = dir.to_str().unwrap();
        let ckpt = dir.join("model.ckpt");
        let k = ckpt.to_str().unwrap();
        let test = dir.join("test.evb1");
        let mut stdout = Vec::new();
        stdout.push(run_bin(&["synth", "--config", c, "--out", d])?);
        stdout.push(run_bin(&["train", "--config", c, "--data", d, "--out", k])?);
        stdout.push(run_bin(&["eval", "--config", c, "--data", d, "--checkpoint", k])?);
        stdout.push(run_bin(&["eval", "--config", c, "--data", d, "--seeds", "2"])?);
        stdout.push(run_bin(&["export-graph", "--checkpoint", k, "--data", test.to_str().unwrap(), "--index", "1"])?);
        stdout.push(run_bin(&["expressivity", "--seeds", "20"])?);
        // Written paths are echoed to stdout; only the run directory may differ.
        let stdout: Vec<String> = stdout.iter().map(|o| String::from_utf8_lossy(o).replace(d, "<run>")).collect();
        runs.push((files(&dir)?, stdout));
    }
    let identical = runs[0] == runs[1];
    let ckpt_path = tmp.path().join("a").join("model.ckpt");
    let bytes = std::fs::read(&ckpt_path).map_err(err)?;
    let round = Checkpoint::load(&ckpt_path).map_err(err)?.to_bytes().map_err(err)?;
    let model = Checkpoint::load(&ckpt_path).map_err(err)?.into_model(None).map_err(err)?;
    let rebuilt = Checkpoint::new(&model, Checkpoint::load(&ckpt_path).map_err(err)?.norm);
    let reloaded = Checkpoint::from_bytes(&rebuilt.to_bytes().map_err(err)?).map_err(err)?;
    let same_model = reloaded.store == model.store && reloaded.config == model.cfg;
    let data_ok = Dataset::read_evb1(&tmp.path().join("a").join("train.evb1")).is_ok();
    outcome(
        identical && round == bytes && same_model && data_ok,
        format!(
            "synth/train/eval/export-graph/expressivity outputs identical across runs: {identical}; checkpoint round-trip byte-identical: {}",
            round == bytes && same_model
        ),
    )
}

fn selected() -> Option<Vec<usize>> {
    let only = std::env::var("EVOBRAIN_ACCEPTANCE_ONLY").ok()?;
    Some(only.split(',').filter_map(|s| s.trim().parse().ok()).collect())
}

fn main() {
    let protocol = Protocol::from_env();
    let only = selected();
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let mut results: Vec<(usize, &str, Result<Outcome, String>)> = Vec::new();
    let mut record = |n: usize, name: &'static str, r: Result<Outcome, String>| {
        let (status, detail) = match &r {
            Ok(o) if o.pass => ("PASS", o.detail.clone()),
            Ok(o) => ("FAIL", o.detail.clone()),
            Err(e) => ("FAIL", format!("error: {e}")),
        };
        println!("criterion {n:>2} {status}: {name}: {detail}");
        results.push((n, name, r));
    };
    if wanted(1) {
        record(1, "expressivity hierarchy", expressivity());
    }
    if wanted(2) {
        record(2, "gradient correctness", gradients());
    }
    if wanted(3) {
        record(3, "spectral suite", spectral());
    }
    if wanted(4) {
        record(4, "graph construction oracle", graph_oracle());
    }
    if wanted(5) {
        record(5, "metric oracles", metric_oracles());
    }
    if wanted(6) || wanted(7) {
        println!("    training families for criteria 6 and 7 ({})", protocol.describe());
        match learning_runs(&protocol) {
            Ok(runs) => {
                record(6, "desk-scale learning and ordering", learning(&protocol, &runs));
                record(7, "explicit versus static ablation", ablation(&protocol, &runs));
            }
            Err(e) => {
                record(6, "desk-scale learning and ordering", Err(e.to_string()));
                record(7, "explicit versus static ablation", Err(e.to_string()));
            }
        }
    }
    if wanted(8) {
        record(8, "complexity trend", complexity());
    }
    if wanted(9) {
        record(9, "selective state space cell invariants", mamba());
    }
    if wanted(10) {
        record(10, "reproducibility", reproducibility());
    }

    let failed: Vec<usize> = results
        .iter()
        .filter(|(_, _, r)| !matches!(r, Ok(o) if o.pass))
        .map(|(n, _, _)| *n)
        .collect();
    let unexpected: Vec<usize> = failed.iter().copied().filter(|n| !KNOWN_RED.contains(n)).collect();
    println!(
        "acceptance: {} of {} criteria pass; failing {:?} (known red {:?})",
        results.len() - failed.len(),
        results.len(),
        failed,
        KNOWN_RED
    );
    if !unexpected.is_empty() {
        println!("acceptance: unexpected failures {unexpected:?}");
        std::process::exit(1);
    }
}
