//! Labelled feature epochs and the line-oriented EVB1 file format.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::signal::norm::NormStats;
use crate::signal::stft::{stft_features, FeatureEpoch};
use crate::signal::synth::{synth_recording, SynthConfig};
use crate::tensor::Tensor;

const MAGIC: &str = "EVB1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train = 0,
    Val = 1,
    Test = 2,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Seed of the `index`-th recording of `split`; the three splits never share a seed.
pub fn recording_seed(base: u64, split: Split, index: usize) -> u64 {
    base.wrapping_mul(4)
        .wrapping_add(split as u64)
        .wrapping_shl(40)
        .wrapping_add(index as u64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub steps: usize,
    pub bins: usize,
    pub epochs: Vec<FeatureEpoch>,
}

impl Dataset {
    pub fn new(epochs: Vec<FeatureEpoch>) -> Result<Self> {
        let first = epochs
            .first()
            .ok_or_else(|| Error::Contract("dataset is empty".into()))?;
        let shape = first.x.shape().to_vec();
        if let Some(bad) = epochs.iter().find(|e| e.x.shape() != shape.as_slice()) {
            return Err(Error::shape("dataset", &shape, bad.x.shape()));
        }
        Ok(Dataset { channels: shape[0], steps: shape[1], bins: shape[2], epochs })
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.epochs.iter().map(|e| e.label).collect()
    }

    pub fn positive_fraction(&self) -> f64 {
        self.epochs.iter().filter(|e| e.label == 1).count() as f64 / self.len() as f64
    }

    pub fn normalized(&self, stats: &NormStats) -> Result<Dataset> {
        let epochs = self
            .epochs
            .iter()
            .map(|e| crate::signal::norm::apply_norm(e, stats))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(epochs)
    }

    pub fn write_evb1(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(self.to_evb1().as_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn to_evb1(&self) -> String {
        let mut out = format!("{MAGIC} N={} T={} D={}\n", self.channels, self.steps, self.bins);
        for e in &self.epochs {
            out.push_str(if e.label == 1 { "1" } else { "0" });
            for v in e.x.data() {
                write!(out, " {v:.16e}").expect("writing to a String");
            }
            out.push('\n');
        }
        out
    }

    pub fn read_evb1(path: &Path) -> Result<Dataset> {
        let file = fs::File::open(path)?;
        Self::parse_evb1(BufReader::new(file))
    }

    pub fn parse_evb1(reader: impl BufRead) -> Result<Dataset> {
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("missing EVB1 header".into()))??;
        let dims = parse_header(&header)?;
        let (n, t, d) = dims;
        let per = n * t * d;
        let mut epochs = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_ascii_whitespace();
            let label: u8 = fields
                .next()
                .and_then(|s| s.parse().ok())
                .filter(|&l| l <= 1)
                .ok_or_else(|| Error::Format(format!("record {}: bad label", lineno + 1)))?;
            let values = fields
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| Error::Format(format!("record {}: bad value {s:?}", lineno + 1)))
                })
                .collect::<Result<Vec<f64>>>()?;
            if values.len() != per {
                return Err(Error::Format(format!(
                    "record {}: expected {per} values, found {}",
                    lineno + 1,
                    values.len()
                )));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("record {}: non-finite value", lineno + 1)));
            }
            epochs.push(FeatureEpoch::new(Tensor::new(vec![n, t, d], values)?, label)?);
        }
        if epochs.is_empty() {
            return Err(Error::Format("EVB1 file has no records".into()));
        }
        Dataset::new(epochs)
    }
}

fn parse_header(header: &str) -> Result<(usize, usize, usize)> {
    let bad = || Error::Format(format!("bad EVB1 header {header:?}"));
    let mut parts = header.split_ascii_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(bad());
    }
    let mut field = |key: &str| -> Result<usize> {
        parts
            .next()
            .and_then(|p| p.strip_prefix(key))
            .and_then(|v| v.parse().ok())
            .filter(|&v: &usize| v > 0)
            .ok_or_else(bad)
    };
    Ok((field("N=")?, field("T=")?, field("D=")?))
}

/// Featurizes `count` recordings of one split, each covering its full duration.
pub fn synth_split(cfg: &SynthConfig, base_seed: u64, split: Split, count: usize) -> Result<Dataset> {
    let epochs = (0..count)
        .map(|i| {
            let rec = synth_recording(cfg, recording_seed(base_seed, split, i))?;
            stft_features(&rec, 0, cfg.duration_s)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(epochs)
}
