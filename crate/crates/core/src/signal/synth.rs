//! Synthetic multichannel EEG with focal, coupled seizure segments.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub channels: usize,
    pub duration_s: usize,
    pub sample_rate: usize,
    /// Probability that a recording contains a seizure segment.
    pub seizure_prob: f64,
    /// Channels the seizure is confined to.
    pub focal: Vec<usize>,
    pub background_components: usize,
    pub background_amplitude: f64,
    pub noise_std: f64,
    /// Seizure oscillation amplitude as a multiple of the background amplitude.
    pub seizure_gain: f64,
    pub seizure_freq_hz: f64,
    /// Weight of the shared source mixed into each focal channel during a seizure.
    pub coupling: f64,
    pub min_seizure_s: usize,
    pub max_seizure_s: usize,
    /// Probability of uncoupled single-channel bursts (artifacts) in a recording.
    pub artifact_prob: f64,
    pub max_artifacts: usize,
    /// Seconds before seizure onset relabeled positive (early-prediction mode).
    pub preictal_s: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            channels: 19,
            duration_s: 12,
            sample_rate: 64,
            seizure_prob: 0.5,
            focal: vec![0, 1, 2, 3, 4],
            background_components: 3,
            background_amplitude: 1.0,
            noise_std: 0.5,
            seizure_gain: 3.0,
            seizure_freq_hz: 3.0,
            coupling: 0.8,
            min_seizure_s: 3,
            max_seizure_s: 8,
            artifact_prob: 0.0,
            max_artifacts: 3,
            preictal_s: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 2 {
            return Err(Error::Config("need at least 2 channels".into()));
        }
        if self.duration_s == 0 || self.sample_rate < 2 {
            return Err(Error::Config("duration and sample rate must be positive".into()));
        }
        if let Some(&c) = self.focal.iter().find(|&&c| c >= self.channels) {
            return Err(Error::Config(format!(
                "focal channel {c} outside 0..{}",
                self.channels
            )));
        }
        if self.focal.is_empty() {
            return Err(Error::Config("focal subset is empty".into()));
        }
        if !(0.0..=1.0).contains(&self.seizure_prob) || !(0.0..=1.0).contains(&self.artifact_prob) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        if self.min_seizure_s == 0 || self.min_seizure_s > self.max_seizure_s {
            return Err(Error::Config("seizure length range is empty".into()));
        }
        Ok(())
    }
}

/// Raw samples (`channels x S`) with one label per second.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub channels: usize,
    pub sample_rate: usize,
    pub samples: Vec<Vec<f64>>,
    pub labels: Vec<u8>,
    /// Seconds in which the seizure oscillation is present (before any preictal relabeling).
    pub seizure_seconds: Vec<bool>,
    pub seed: u64,
}

impl Recording {
    pub fn seconds(&self) -> usize {
        self.labels.len()
    }

    pub fn len_samples(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }
}

fn sinusoid_mix(rng: &mut ChaCha8Rng, components: usize, amplitude: f64) -> Vec<(f64, f64, f64)> {
    (0..components)
        .map(|_| {
            let f = rng.random_range(2.0..=12.0);
            let phase = rng.random_range(0.0..TAU);
            let a = amplitude * rng.random_range(0.5..=1.0);
            (f, phase, a)
        })
        .collect()
}

fn eval_mix(mix: &[(f64, f64, f64)], t: f64) -> f64 {
    mix.iter().map(|&(f, p, a)| a * (TAU * f * t + p).sin()).sum()
}

pub fn synth_recording(cfg: &SynthConfig, seed: u64) -> Result<Recording> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let rate = cfg.sample_rate;
    let total = cfg.duration_s * rate;

    let mut samples: Vec<Vec<f64>> = (0..cfg.channels)
        .map(|_| {
            let mix = sinusoid_mix(&mut rng, cfg.background_components, cfg.background_amplitude);
            (0..total)
                .map(|s| eval_mix(&mix, s as f64 / rate as f64) + noise.sample(&mut rng))
                .collect()
        })
        .collect();

    let mut seizure = vec![false; cfg.duration_s];
    let mut onset = None;
    if rng.random_bool(cfg.seizure_prob) {
        let longest = cfg.max_seizure_s.min(cfg.duration_s);
        let shortest = cfg.min_seizure_s.min(longest);
        let len = rng.random_range(shortest..=longest);
        let start = rng.random_range(0..=cfg.duration_s - len);
        seizure[start..start + len].iter_mut().for_each(|s| *s = true);
        onset = Some(start);

        let source_mix = sinusoid_mix(&mut rng, cfg.background_components, cfg.background_amplitude);
        let phase = rng.random_range(0.0..TAU);
        let amp = cfg.seizure_gain * cfg.background_amplitude;
        let from = start * rate;
        let to = (start + len) * rate;
        let source: Vec<f64> = (from..to)
            .map(|s| eval_mix(&source_mix, s as f64 / rate as f64) + noise.sample(&mut rng))
            .collect();
        for &c in &cfg.focal {
            for s in from..to {
                let t = s as f64 / rate as f64;
                let own = samples[c][s];
                samples[c][s] = (1.0 - cfg.coupling) * own
                    + cfg.coupling * source[s - from]
                    + amp * (TAU * cfg.seizure_freq_hz * t + phase).sin();
            }
        }
    }

    if cfg.artifact_prob > 0.0 && rng.random_bool(cfg.artifact_prob) {
        let count = rng.random_range(1..=cfg.max_artifacts.max(1));
        let amp = cfg.seizure_gain * cfg.background_amplitude;
        for _ in 0..count {
            let c = rng.random_range(0..cfg.channels);
            let sec = rng.random_range(0..cfg.duration_s);
            let phase = rng.random_range(0.0..TAU);
            for s in sec * rate..(sec + 1) * rate {
                let t = s as f64 / rate as f64;
                samples[c][s] += amp * (TAU * cfg.seizure_freq_hz * t + phase).sin();
            }
        }
    }

    let mut labels: Vec<u8> = seizure.iter().map(|&s| s as u8).collect();
    if let (Some(start), true) = (onset, cfg.preictal_s > 0) {
        let from = start.saturating_sub(cfg.preictal_s);
        labels[from..start].iter_mut().for_each(|l| *l = 1);
    }

    Ok(Recording {
        channels: cfg.channels,
        sample_rate: rate,
        samples,
        labels,
        seizure_seconds: seizure,
        seed,
    })
}

/// Multiplies every channel by one uniform draw from `[0.8, 1.2]`.
pub fn augment_scale(rec: &Recording, seed: u64) -> (Recording, f64) {
    let u = scale_draw(seed);
    (scale_recording(rec, u), u)
}

pub fn scale_draw(seed: u64) -> f64 {
    ChaCha8Rng::seed_from_u64(seed).random_range(0.8..=1.2)
}

pub fn scale_recording(rec: &Recording, u: f64) -> Recording {
    let mut out = rec.clone();
    for ch in &mut out.samples {
        ch.iter_mut().for_each(|v| *v *= u);
    }
    out
}

/// Zero-lag Pearson correlation of two equal-length slices; 0 when either is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    sab / (saa.sqrt() * sbb.sqrt())
}
