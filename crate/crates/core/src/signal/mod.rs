//! Waveform I/O, STFT analysis/synthesis and mask-estimator input features.

mod features;
mod stft;
mod wave;

pub use features::{extract_features, FeatureFrameSeq, FeatureLayout, MAG_FLOOR};
pub use stft::{istft, sqrt_hann, stft, SpecKind, Spectrogram, DEFAULT_FRAME, DEFAULT_HOP};
pub use wave::{read_wav, write_wav, MultichannelWave, WavFormat, DEFAULT_SAMPLE_RATE};
