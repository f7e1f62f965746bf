//! Raw signal synthesis, spectral featurization and normalization.

pub mod dataset;
pub mod norm;
pub mod stft;
pub mod synth;

pub use dataset::{recording_seed, synth_split, Dataset, Split};
pub use norm::{apply_norm, fit_norm, NormStats};
pub use stft::{stft_features, FeatureEpoch};
pub use synth::{augment_scale, synth_recording, Recording, SynthConfig};
