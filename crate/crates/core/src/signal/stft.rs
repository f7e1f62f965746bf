use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::signal::synth::Recording;
use crate::tensor::Tensor;

pub const LOG_FLOOR: f64 = 1e-8;

/// Log-amplitude spectra for one window: `x` has shape `[N, T, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureEpoch {
    pub x: Tensor,
    pub window_seconds: usize,
    pub label: u8,
}

impl FeatureEpoch {
    pub fn new(x: Tensor, label: u8) -> Result<Self> {
        if x.rank() != 3 {
            return Err(Error::shape("feature_epoch", x.shape(), &[0, 0, 0]));
        }
        if label > 1 {
            return Err(Error::Format(format!("label {label} is not 0/1")));
        }
        let window_seconds = x.shape()[1];
        Ok(FeatureEpoch { x, window_seconds, label })
    }

    pub fn channels(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn steps(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn bins(&self) -> usize {
        self.x.shape()[2]
    }

    /// Feature vector of channel `i` at snapshot `t`.
    pub fn snapshot(&self, i: usize, t: usize) -> &[f64] {
        let (tt, d) = (self.steps(), self.bins());
        let off = (i * tt + t) * d;
        &self.x.data()[off..off + d]
    }

    /// Log-amplitude equivalent of scaling the raw signal by `u`.
    pub fn shift_log_amplitude(&self, u: f64) -> FeatureEpoch {
        let s = u.ln();
        FeatureEpoch {
            x: self.x.map(|v| v + s),
            ..self.clone()
        }
    }
}

/// Magnitudes of the full `n`-point DFT of `samples`.
pub fn dft_magnitudes(samples: &[f64]) -> Vec<f64> {
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(samples.len());
    let mut buf: Vec<Complex<f64>> = samples.iter().map(|&x| Complex::new(x, 0.0)).collect();
    fft.process(&mut buf);
    buf.iter().map(|c| c.norm()).collect()
}

/// One-second rectangular, non-overlapping STFT over `window_seconds`
/// starting at `epoch_start` (seconds), keeping bins `0..=rate/2`.
pub fn stft_features(rec: &Recording, epoch_start: usize, window_seconds: usize) -> Result<FeatureEpoch> {
    if window_seconds == 0 || epoch_start + window_seconds > rec.seconds() {
        return Err(Error::Bounds(format!(
            "window {epoch_start}..{} exceeds {} s recording",
            epoch_start + window_seconds,
            rec.seconds()
        )));
    }
    let n = rec.sample_rate;
    let d = n / 2 + 1;
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let mut data = Vec::with_capacity(rec.channels * window_seconds * d);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for ch in &rec.samples {
        for sec in epoch_start..epoch_start + window_seconds {
            for (b, &x) in buf.iter_mut().zip(&ch[sec * n..(sec + 1) * n]) {
                *b = Complex::new(x, 0.0);
            }
            fft.process(&mut buf);
            data.extend(buf[..d].iter().map(|c| (c.norm() + LOG_FLOOR).ln()));
        }
    }
    let label = rec.labels[epoch_start..epoch_start + window_seconds]
        .iter()
        .copied()
        .max()
        .unwrap_or(0);
    FeatureEpoch::new(Tensor::new(vec![rec.channels, window_seconds, d], data)?, label)
}
