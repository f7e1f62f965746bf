//! Mini-batch training, evaluation metrics and multi-seed experiments.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::architectures::{ArchKind, Model, ModelConfig};
use crate::autodiff::{adam_step, AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::graphgen::{build_dynamic, TemporalGraph, DEFAULT_TAU};
use crate::sequence::{DEFAULT_HIDDEN, DEFAULT_LAYERS};
use crate::signal::{apply_norm, fit_norm, Dataset, FeatureEpoch, NormStats};
use crate::signal::synth::scale_draw;
use crate::spatial::{PoolMode, DEFAULT_K};

pub const DEFAULT_EPOCHS: usize = 100;
pub const DEFAULT_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub arch: ArchKind,
    pub tau: usize,
    pub k: usize,
    pub hidden: usize,
    pub seq_layers: usize,
    pub gcn_layers: usize,
    pub pool: PoolMode,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: DEFAULT_EPOCHS,
            lr: crate::autodiff::DEFAULT_LR,
            batch_size: DEFAULT_BATCH,
            seed: 0,
            arch: ArchKind::evobrain(),
            tau: DEFAULT_TAU,
            k: DEFAULT_K,
            hidden: DEFAULT_HIDDEN,
            seq_layers: DEFAULT_LAYERS,
            gcn_layers: 2,
            pool: PoolMode::Max,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} is not a finite non-negative value", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, nodes: usize, d_in: usize) -> ModelConfig {
        let mut cfg = ModelConfig::new(self.arch, nodes, d_in);
        cfg.hidden = self.hidden;
        cfg.seq_layers = self.seq_layers;
        cfg.gcn_layers = self.gcn_layers;
        cfg.k = self.k.min(nodes);
        cfg.pool = self.pool;
        cfg
    }
}

fn check_binary(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::shape("metric", &[scores.len()], &[labels.len()]));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("scores contain NaN".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.iter().filter(|&&l| l == 0).count();
    if pos + neg != labels.len() {
        return Err(Error::Contract("labels must be 0 or 1".into()));
    }
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("both classes must be present".into()));
    }
    Ok((pos, neg))
}

/// Probability that a random positive outscores a random negative, ties counting half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_binary(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of positive ranks, tied groups sharing their mean rank (doubled to stay integral).
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let positives = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        rank_sum2 += positives * (i as u128 + j as u128 + 2);
        i = j + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    let concordant2 = rank_sum2 - p * (p + 1);
    Ok(concordant2 as f64 / (2 * p * n) as f64)
}

pub fn f1_at(scores: &[f64], labels: &[u8], threshold: f64) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s > threshold, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// Candidate thresholds: midpoints of sorted unique scores plus one below
/// the minimum (everything predicted positive). A score is positive iff it
/// exceeds the threshold.
pub fn candidate_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut unique: Vec<f64> = scores.to_vec();
    unique.sort_by(f64::total_cmp);
    unique.dedup();
    let mut out = Vec::with_capacity(unique.len());
    if let Some(&lo) = unique.first() {
        out.push(lo - 1.0);
    }
    out.extend(unique.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    out
}

/// Best F1 over the candidate thresholds; ties go to the lower threshold.
pub fn f1_best_threshold(scores: &[f64], labels: &[u8]) -> Result<(f64, f64)> {
    check_binary(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let total_pos = labels.iter().filter(|&&l| l == 1).count();
    // Sweep thresholds from high to low; each candidate admits one more unique score.
    let thresholds = candidate_thresholds(scores);
    let mut best = (f64::NEG_INFINITY, f64::INFINITY);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    for &th in thresholds.iter().rev() {
        while k < order.len() && scores[order[k]] > th {
            if labels[order[k]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let f1 = if tp == 0 { 0.0 } else { 2.0 * tp as f64 / (tp + fp + total_pos) as f64 };
        if f1 >= best.0 {
            best = (f1, th);
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auroc: f64,
    pub val_f1: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_auroc,val_f1\n");
        for r in &self.rows {
            writeln!(s, "{},{:.10},{:.10},{:.10}", r.epoch, r.train_loss, r.val_auroc, r.val_f1).expect("string write");
        }
        s
    }
}

pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation AUROC.
    pub model: Model,
    pub norm: NormStats,
    pub best_epoch: usize,
    pub best_val_auroc: f64,
    /// Best-F1 threshold on the validation split for the retained model.
    pub threshold: f64,
    pub history: History,
}

/// Normalizes and builds the dynamic graph of every epoch.
pub fn graphs_for(epochs: &[FeatureEpoch], norm: &NormStats, tau: usize) -> Result<Vec<TemporalGraph>> {
    epochs.iter().map(|e| build_dynamic(&apply_norm(e, norm)?.x, tau)).collect()
}

/// Probabilities for every graph, evaluated in batches.
pub fn predict_all(model: &Model, graphs: &[TemporalGraph], batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(graphs.len());
    for chunk in graphs.chunks(batch_size.max(1)) {
        out.extend(model.predict(&model.batch(chunk)?)?);
    }
    Ok(out)
}

fn augmentation_seed(seed: u64, epoch: usize, sample: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ ((epoch as u64) << 32) ^ sample as u64
}

pub fn train(cfg: &TrainConfig, train_set: &Dataset, val_set: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Contract("train and validation sets must be non-empty".into()));
    }
    if (train_set.channels, train_set.steps, train_set.bins) != (val_set.channels, val_set.steps, val_set.bins) {
        return Err(Error::shape(
            "train",
            &[train_set.channels, train_set.steps, train_set.bins],
            &[val_set.channels, val_set.steps, val_set.bins],
        ));
    }
    let norm = fit_norm(&train_set.epochs)?;
    let plain = graphs_for(&train_set.epochs, &norm, cfg.tau)?;
    let val_graphs = graphs_for(&val_set.epochs, &norm, cfg.tau)?;
    let labels = train_set.labels();
    let val_labels = val_set.labels();

    let mut model = Model::new(cfg.model_config(train_set.channels, train_set.bins), cfg.seed)?;
    let adam_cfg = AdamConfig { lr: cfg.lr, ..Default::default() };
    let mut adam = AdamState::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a1e);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = History::default();
    let mut best: Option<(Model, usize, f64)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let graphs: Vec<TemporalGraph> = if cfg.augment {
                idx.iter()
                    .map(|&i| {
                        let u = scale_draw(augmentation_seed(cfg.seed, epoch, i));
                        let shifted = train_set.epochs[i].shift_log_amplitude(u);
                        build_dynamic(&apply_norm(&shifted, &norm)?.x, cfg.tau)
                    })
                    .collect::<Result<_>>()?
            } else {
                idx.iter().map(|&i| plain[i].clone()).collect()
            };
            let y: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
            let (loss, grads) = model.loss_and_grads(&model.batch(&graphs)?, &y)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b, loss });
            }
            loss_sum += loss * idx.len() as f64;
            model.store.set_grads(grads.clone())?;
            adam_step(&mut model.store, &grads, &mut adam, &adam_cfg)?;
        }
        let scores = predict_all(&model, &val_graphs, cfg.batch_size)?;
        let val_auroc = auroc(&scores, &val_labels)?;
        let (val_f1, _) = f1_best_threshold(&scores, &val_labels)?;
        let train_loss = loss_sum / train_set.len() as f64;
        log::info!("epoch {epoch}: loss {train_loss:.5} val auroc {val_auroc:.4} f1 {val_f1:.4}");
        history.rows.push(HistoryRow { epoch, train_loss, val_auroc, val_f1 });
        if best.as_ref().is_none_or(|(_, _, a)| val_auroc > *a) {
            best = Some((model.clone(), epoch, val_auroc));
        }
    }
    let (model, best_epoch, best_val_auroc) = best.expect("at least one epoch");
    let scores = predict_all(&model, &val_graphs, cfg.batch_size)?;
    let (_, threshold) = f1_best_threshold(&scores, &val_labels)?;
    Ok(TrainOutcome { model, norm, best_epoch, best_val_auroc, threshold, history })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub auroc: f64,
    pub f1: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub arch: String,
    pub per_seed: Vec<SeedResult>,
    pub auroc_mean: f64,
    pub auroc_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
}

/// Sample mean and standard deviation (zero for a single value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl EvalReport {
    pub fn new(arch: String, per_seed: Vec<SeedResult>) -> Result<Self> {
        if per_seed.is_empty() {
            return Err(Error::Contract("report needs at least one seed".into()));
        }
        let (auroc_mean, auroc_std) = mean_std(&per_seed.iter().map(|r| r.auroc).collect::<Vec<_>>());
        let (f1_mean, f1_std) = mean_std(&per_seed.iter().map(|r| r.f1).collect::<Vec<_>>());
        Ok(EvalReport { arch, per_seed, auroc_mean, auroc_std, f1_mean, f1_std })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Test-set metrics of a trained model; F1 uses the validation threshold.
pub fn evaluate(model: &Model, norm: &NormStats, tau: usize, threshold: f64, test: &Dataset, seed: u64) -> Result<SeedResult> {
    let graphs = graphs_for(&test.epochs, norm, tau)?;
    let labels = test.labels();
    let scores = predict_all(model, &graphs, DEFAULT_BATCH)?;
    Ok(SeedResult { seed, auroc: auroc(&scores, &labels)?, f1: f1_at(&scores, &labels, threshold), threshold })
}

/// Trains and tests once per seed.
pub fn run_seeds(cfg: &TrainConfig, seeds: &[u64], train_set: &Dataset, val: &Dataset, test: &Dataset) -> Result<EvalReport> {
    let mut results = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let run = TrainConfig { seed, ..cfg.clone() };
        let out = train(&run, train_set, val)?;
        let r = evaluate(&out.model, &out.norm, cfg.tau, out.threshold, test, seed)?;
        log::info!("{} seed {seed}: test auroc {:.4} f1 {:.4} (best epoch {})", cfg.arch, r.auroc, r.f1, out.best_epoch);
        results.push(r);
    }
    EvalReport::new(cfg.arch.to_string(), results)
}
