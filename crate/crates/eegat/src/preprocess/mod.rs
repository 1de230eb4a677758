//! Band-pass filtering, ICA-based cleaning, and windowing of recordings.

mod filter;
mod ica;
mod window;

pub use filter::{bandpass_filter, BandpassFilter};
pub use ica::{fast_ica_clean, FastIcaOptions};
pub use window::{segment_windows, Window};

use thiserror::Error;

use crate::dataset::{ClassLabel, Recording};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("invalid band [{low}, {high}] Hz for fs {fs} Hz")]
    InvalidBand { low: f64, high: f64, fs: f64 },
    #[error("FastICA did not converge within {0} iterations")]
    NoConvergence(usize),
    #[error("recording too short: {got} samples, need at least {need}")]
    TooShort { got: usize, need: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Preprocessing stage settings; see the config keys of the same names.
#[derive(Clone, Debug)]
pub struct PreprocessOptions {
    pub low_hz: f64,
    pub high_hz: f64,
    pub ica_enabled: bool,
    pub ica_components: usize,
    pub ica_reject: bool,
    pub window_len_s: f64,
    pub overlap_s: f64,
    pub seed: u64,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            low_hz: 0.5,
            high_hz: 45.0,
            ica_enabled: false,
            ica_components: 10,
            ica_reject: false,
            window_len_s: 5.0,
            overlap_s: 1.0,
            seed: 0,
        }
    }
}

/// Full preprocessing of one recording: band-pass, optional ICA cleaning,
/// then windowing. The first and last second are dropped before windowing to
/// discard filter transients.
pub fn preprocess_recording(
    rec: &Recording,
    label: ClassLabel,
    opts: &PreprocessOptions,
) -> Result<Vec<Window>, PreprocessError> {
    let mut filtered = bandpass_filter(rec, opts.low_hz, opts.high_hz)?;
    if opts.ica_enabled {
        let ica = FastIcaOptions { seed: opts.seed, ..FastIcaOptions::default() };
        filtered = fast_ica_clean(&filtered, opts.ica_components, opts.ica_reject, &ica)?;
    }

    let trim = rec.fs.round() as usize;
    if filtered.n_samples() <= 2 * trim {
        return Err(PreprocessError::TooShort { got: filtered.n_samples(), need: 2 * trim + 1 });
    }
    let trimmed = Recording {
        subject_id: filtered.subject_id.clone(),
        channels: filtered.channels.clone(),
        data: filtered.data.slice(ndarray::s![trim..filtered.n_samples() - trim, ..]).to_owned(),
        fs: filtered.fs,
    };
    segment_windows(&trimmed, opts.window_len_s, opts.overlap_s, label)
}
