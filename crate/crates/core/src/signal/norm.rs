use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::stft::FeatureEpoch;
use crate::tensor::Tensor;

pub const STD_FLOOR: f64 = 1e-8;

/// Per-frequency-bin statistics pooled over channels, snapshots and epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn fit_norm(epochs: &[FeatureEpoch]) -> Result<NormStats> {
    let first = epochs
        .first()
        .ok_or_else(|| Error::Contract("cannot fit normalization on an empty set".into()))?;
    let d = first.bins();
    let mut sum = vec![0.0; d];
    let mut count = 0usize;
    for e in epochs {
        if e.bins() != d {
            return Err(Error::shape("fit_norm", first.x.shape(), e.x.shape()));
        }
        for row in e.x.data().chunks_exact(d) {
            for (s, v) in sum.iter_mut().zip(row) {
                *s += v;
            }
        }
        count += e.channels() * e.steps();
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
    let mut var = vec![0.0; d];
    for e in epochs {
        for row in e.x.data().chunks_exact(d) {
            for ((acc, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
    }
    let std = var
        .iter()
        .map(|v| (v / count as f64).sqrt().max(STD_FLOOR))
        .collect();
    Ok(NormStats { mean, std })
}

pub fn apply_norm(epoch: &FeatureEpoch, stats: &NormStats) -> Result<FeatureEpoch> {
    let d = epoch.bins();
    if stats.mean.len() != d || stats.std.len() != d {
        return Err(Error::shape("apply_norm", epoch.x.shape(), &[stats.mean.len()]));
    }
    let mut data = epoch.x.data().to_vec();
    for row in data.chunks_exact_mut(d) {
        for ((v, m), s) in row.iter_mut().zip(&stats.mean).zip(&stats.std) {
            *v = (*v - m) / s;
        }
    }
    Ok(FeatureEpoch {
        x: Tensor::new(epoch.x.shape().to_vec(), data)?,
        ..epoch.clone()
    })
}
