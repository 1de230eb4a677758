//! Per-channel node features: Katz fractal dimension and band energies.
//!
//! Each window maps to a `[14 x 5]` feature matrix with the fixed column
//! order `[katz_fd, E_delta, E_theta, E_alpha, E_beta]`. A z-score
//! [`Normalizer`] fitted on training windows only puts the energy scales and
//! the fractal dimension on comparable footing.

use ndarray::Array2;
use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::Window;
use crate::N_CHANNELS;

/// Feature column order.
pub const FEATURE_NAMES: [&str; 5] = ["katz_fd", "e_delta", "e_theta", "e_alpha", "e_beta"];

/// Number of per-channel features.
pub const N_FEATURES: usize = 5;

/// EEG band edges in Hz; beta ends at 29 Hz.
pub const BANDS: [(f64, f64); 4] = [(0.5, 4.0), (4.0, 8.0), (8.0, 12.0), (12.0, 29.0)];

/// `[14 x 5]` node-feature matrix in the fixed column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub values: Vec<Vec<f64>>,
}

impl FeatureMatrix {
    pub fn get(&self, channel: usize, feature: usize) -> f64 {
        self.values[channel][feature]
    }
}

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("series too short: {got} samples, need at least {need}")]
    TooShort { got: usize, need: usize },
    #[error("invalid band [{low}, {high}] Hz at fs {fs} Hz")]
    InvalidBand { low: f64, high: f64, fs: f64 },
    #[error("cannot fit a normalizer on an empty training set")]
    EmptyTrainSet,
}

/// Spectral window applied before the periodogram.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowFn {
    Hann,
    Rect,
}

/// Katz fractal dimension of a series over points `(i, x_i)` with unit index
/// spacing.
///
/// `FD = log10(n) / (log10(n) + log10(d / L))` where `n` is the step count,
/// `L` the total curve length, and `d` the maximum distance from the first
/// point. Straight lines (and constants) give exactly 1.0.
pub fn katz_fd(series: &[f64]) -> Result<f64, FeatureError> {
    if series.len() < 2 {
        return Err(FeatureError::TooShort { got: series.len(), need: 2 });
    }
    let n = (series.len() - 1) as f64;
    let mut length = 0.0;
    for pair in series.windows(2) {
        let dy = pair[1] - pair[0];
        length += (1.0 + dy * dy).sqrt();
    }
    let mut max_dist: f64 = 0.0;
    let x0 = series[0];
    for (i, &x) in series.iter().enumerate().skip(1) {
        let dx = i as f64;
        let dy = x - x0;
        max_dist = max_dist.max((dx * dx + dy * dy).sqrt());
    }
    if length == 0.0 {
        return Ok(1.0);
    }
    let numerator = n.log10();
    let denominator = numerator + (max_dist / length).log10();
    if denominator == 0.0 {
        return Ok(1.0);
    }
    Ok(numerator / denominator)
}

/// One-sided windowed periodogram of `series`, Parseval-normalized:
/// bin powers sum exactly to the windowed signal energy.
///
/// Returns `(powers, bin_hz)` with `powers.len() == n/2 + 1`; the last bin is
/// the Nyquist frequency.
pub fn periodogram(series: &[f64], fs: f64, window_fn: WindowFn) -> (Vec<f64>, f64) {
    let n = series.len();
    let mut buf: Vec<Complex64> = match window_fn {
        WindowFn::Rect => series.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        WindowFn::Hann => series
            .iter()
            .enumerate()
            .map(|(t, &v)| {
                let w = 0.5 * (1.0 - (std::f64::consts::TAU * t as f64 / n as f64).cos());
                Complex64::new(v * w, 0.0)
            })
            .collect(),
    };
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);

    let half = n / 2;
    let mut powers = Vec::with_capacity(half + 1);
    for (k, c) in buf.iter().take(half + 1).enumerate() {
        let doubling = if k == 0 || (n % 2 == 0 && k == half) { 1.0 } else { 2.0 };
        powers.push(doubling * c.norm_sqr() / n as f64);
    }
    (powers, fs / n as f64)
}

/// Energy of `series` in `[low, high)` Hz from the windowed periodogram.
///
/// A band whose upper edge reaches the Nyquist frequency includes the
/// Nyquist bin, so bands tiling `[0, fs/2]` sum to the total windowed energy.
pub fn band_energy(
    series: &[f64],
    band: (f64, f64),
    fs: f64,
    window_fn: WindowFn,
) -> Result<f64, FeatureError> {
    let (low, high) = band;
    let nyquist = fs / 2.0;
    if !(low >= 0.0 && low < high && high <= nyquist) {
        return Err(FeatureError::InvalidBand { low, high, fs });
    }
    let need = fs.ceil() as usize;
    if series.len() < need {
        return Err(FeatureError::TooShort { got: series.len(), need });
    }
    let (powers, bin_hz) = periodogram(series, fs, window_fn);
    let include_nyquist = (high - nyquist).abs() < 1e-12;
    let mut energy = 0.0;
    for (k, &p) in powers.iter().enumerate() {
        let f = k as f64 * bin_hz;
        if (f >= low && f < high) || (include_nyquist && (f - nyquist).abs() < 1e-12) {
            energy += p;
        }
    }
    Ok(energy)
}

/// All five features for every channel of a window.
pub fn node_features(window: &Window, window_fn: WindowFn) -> Result<FeatureMatrix, FeatureError> {
    let mut values = Vec::with_capacity(N_CHANNELS);
    for ch in 0..window.data.ncols() {
        let series: Vec<f64> = window.data.column(ch).to_vec();
        let mut row = Vec::with_capacity(N_FEATURES);
        row.push(katz_fd(&series)?);
        for band in BANDS {
            row.push(band_energy(&series, band, window.fs, window_fn)?);
        }
        values.push(row);
    }
    Ok(FeatureMatrix { values })
}

/// Per-feature z-score statistics fitted on training windows only.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Fit a z-score normalizer across all rows of all training matrices.
/// Zero-variance features have their std clamped to 1.
pub fn fit_normalizer(train: &[FeatureMatrix]) -> Result<Normalizer, FeatureError> {
    if train.is_empty() {
        return Err(FeatureError::EmptyTrainSet);
    }
    let n_rows: usize = train.iter().map(|m| m.values.len()).sum();
    let mut mean = vec![0.0; N_FEATURES];
    for m in train {
        for row in &m.values {
            for (f, &v) in row.iter().enumerate() {
                mean[f] += v;
            }
        }
    }
    for m in &mut mean {
        *m /= n_rows as f64;
    }
    let mut var = vec![0.0; N_FEATURES];
    for m in train {
        for row in &m.values {
            for (f, &v) in row.iter().enumerate() {
                var[f] += (v - mean[f]).powi(2);
            }
        }
    }
    let std = var
        .iter()
        .map(|&v| {
            let s = (v / n_rows as f64).sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    Ok(Normalizer { mean, std })
}

/// Apply stored statistics; never looks at the input's own distribution.
pub fn apply_normalizer(normalizer: &Normalizer, features: &FeatureMatrix) -> FeatureMatrix {
    let values = features
        .values
        .iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .map(|(f, &v)| (v - normalizer.mean[f]) / normalizer.std[f])
                .collect()
        })
        .collect();
    FeatureMatrix { values }
}

/// Test/demo helper: a window around a data matrix.
pub fn window_from_data(data: Array2<f64>, fs: f64) -> Window {
    Window {
        subject_id: "adhoc".into(),
        index: 0,
        data,
        label: crate::dataset::ClassLabel::Control,
        fs,
    }
}
