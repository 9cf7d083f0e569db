//! Speech denoising workbench built around psychoacoustically weighted
//! mask-estimation networks.
//!
//! The pipeline: mix clean speech with noise at a target SNR, compute
//! magnitude spectrogram features and ideal-ratio-mask targets, derive
//! per-bin perceptual weights from a tonal masking model of the clean
//! speech, train a small feed-forward network on the (optionally weighted)
//! mean-squared error, then denoise and score with objective and
//! intelligibility metrics.
//!
//! Entry points: [`dsp`] for STFT machinery, [`psycho`] for masking
//! thresholds and weights, [`net`] for the network and trainer, [`data`]
//! for corpus preparation, [`eval`] for metrics, and [`cli`] for the
//! command-line front end.

pub mod audio;
pub mod cli;
pub mod data;
pub mod dsp;
pub mod eval;
pub mod net;
pub mod psycho;
pub mod synth;

use std::path::PathBuf;

/// Sample rate the pipeline is fixed to, end to end.
pub const SAMPLE_RATE: u32 = 16_000;
/// Analysis FFT length in samples.
pub const FFT_SIZE: usize = 1024;
/// Analysis hop in samples (75% overlap).
pub const HOP: usize = FFT_SIZE / 4;
/// Number of one-sided frequency bins.
pub const FREQ_BINS: usize = FFT_SIZE / 2 + 1;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("wav: {0}")]
    Wav(String),
    #[error("signal too short")]
    SignalTooShort,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("feature cache: {0}")]
    Cache(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("diverged: {0}")]
    Diverged(String),
    #[error("insufficient speech")]
    InsufficientSpeech,
    #[error("{0}")]
    Data(String),
}

impl Error {
    fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    /// Process exit code for the CLI: 1 usage, 2 data, 3 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArg(_) => 1,
            Error::Diverged(_) => 3,
            _ => 2,
        }
    }
}
