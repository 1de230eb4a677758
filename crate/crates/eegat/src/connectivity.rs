//! Phase-locking values and complete-graph assembly.
//!
//! Each window becomes a complete weighted graph over the 14 electrodes:
//! every ordered channel pair carries the pair's PLV, self-loops carry 1.0.
//! PLV is computed once per unordered pair, so the matrix is exactly
//! symmetric.

use std::io::{BufRead, Write};
use std::path::Path;

use rustfft::{num_complex::Complex64, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::ClassLabel;
use crate::features::FeatureMatrix;
use crate::preprocess::{BandpassFilter, Window};


#[derive(Debug, Error)]
pub enum ConnectivityError {
    #[error("series too short: {got} samples, need at least {need}")]
    TooShort { got: usize, need: usize },
    #[error("phase vectors have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("window/features channel mismatch: {0} vs {1}")]
    ChannelMismatch(usize, usize),
    #[error("filter error: {0}")]
    Filter(#[from] crate::preprocess::PreprocessError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Which signal the PLV is computed on. Broadband uses the preprocessed
/// window as-is; a named band applies an extra band-pass first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PlvBand {
    #[default]
    Broadband,
    Delta,
    Theta,
    Alpha,
    Beta,
}

impl PlvBand {
    pub fn edges_hz(self) -> Option<(f64, f64)> {
        match self {
            PlvBand::Broadband => None,
            PlvBand::Delta => Some((0.5, 4.0)),
            PlvBand::Theta => Some((4.0, 8.0)),
            PlvBand::Alpha => Some((8.0, 12.0)),
            PlvBand::Beta => Some((12.0, 29.0)),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "broadband" => Some(PlvBand::Broadband),
            "delta" => Some(PlvBand::Delta),
            "theta" => Some(PlvBand::Theta),
            "alpha" => Some(PlvBand::Alpha),
            "beta" => Some(PlvBand::Beta),
            _ => None,
        }
    }
}

/// One window as a complete weighted graph with node features.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GraphSample {
    pub subject_id: String,
    pub window_index: usize,
    pub label: ClassLabel,
    /// `[14 x 5]` node features.
    pub node_features: FeatureMatrix,
    /// `[14 x 14]` symmetric PLV matrix with unit diagonal.
    pub plv: Vec<Vec<f64>>,
}

impl GraphSample {
    /// Directed edge list including self-loops, grouped by target node:
    /// `(sources, targets, attributes)`. 14 x 14 = 196 edges.
    pub fn edge_list(&self) -> (Vec<usize>, Vec<usize>, Vec<f64>) {
        let n = self.plv.len();
        let mut src = Vec::with_capacity(n * n);
        let mut dst = Vec::with_capacity(n * n);
        let mut attr = Vec::with_capacity(n * n);
        for target in 0..n {
            for source in 0..n {
                src.push(source);
                dst.push(target);
                attr.push(self.plv[source][target]);
            }
        }
        (src, dst, attr)
    }

    pub fn n_nodes(&self) -> usize {
        self.plv.len()
    }
}

/// Instantaneous phase of the analytic signal (frequency-domain Hilbert
/// transform), in `(-pi, pi]`. An all-zero input yields all-zero phase.
pub fn analytic_phase(series: &[f64]) -> Result<Vec<f64>, ConnectivityError> {
    let n = series.len();
    if n < 4 {
        return Err(ConnectivityError::TooShort { got: n, need: 4 });
    }
    let mut buf: Vec<Complex64> = series.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);

    // Keep DC (and Nyquist for even n), double positives, zero negatives.
    let half = n / 2;
    for (k, c) in buf.iter_mut().enumerate() {
        if k == 0 || (n % 2 == 0 && k == half) {
            // unchanged
        } else if k < half || (n % 2 == 1 && k == half) {
            *c *= 2.0;
        } else {
            *c = Complex64::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    // rustfft leaves the inverse unscaled; atan2 is scale-invariant, but
    // normalize anyway so callers can reuse the analytic amplitude.
    Ok(buf.iter().map(|c| (c.im / n as f64).atan2(c.re / n as f64)).collect())
}

/// Phase-locking value of two phase series:
/// `|mean_t exp(i (a_t - b_t))|` in `[0, 1]`.
pub fn plv(phase_a: &[f64], phase_b: &[f64]) -> Result<f64, ConnectivityError> {
    if phase_a.len() != phase_b.len() {
        return Err(ConnectivityError::LengthMismatch(phase_a.len(), phase_b.len()));
    }
    if phase_a.is_empty() {
        return Err(ConnectivityError::TooShort { got: 0, need: 1 });
    }
    let mut sum = Complex64::new(0.0, 0.0);
    for (&a, &b) in phase_a.iter().zip(phase_b) {
        let d = a - b;
        sum += Complex64::new(d.cos(), d.sin());
    }
    Ok((sum / phase_a.len() as f64).norm().min(1.0))
}

/// PLV matrix of a window: one computation per unordered pair, unit
/// diagonal. `band` optionally narrows the signal first.
pub fn plv_matrix(window: &Window, band: PlvBand) -> Result<Vec<Vec<f64>>, ConnectivityError> {
    let n_ch = window.data.ncols();
    let filter = match band.edges_hz() {
        Some((low, high)) => Some(BandpassFilter::design(low, high, window.fs)?),
        None => None,
    };
    let mut phases = Vec::with_capacity(n_ch);
    for ch in 0..n_ch {
        let series: Vec<f64> = window.data.column(ch).to_vec();
        let series = match &filter {
            Some(f) => f.filtfilt(&series),
            None => series,
        };
        phases.push(analytic_phase(&series)?);
    }
    let mut matrix = vec![vec![0.0; n_ch]; n_ch];
    for i in 0..n_ch {
        matrix[i][i] = 1.0;
        for j in (i + 1)..n_ch {
            let value = plv(&phases[i], &phases[j])?;
            matrix[i][j] = value;
            matrix[j][i] = value;
        }
    }
    Ok(matrix)
}

/// Assemble the complete weighted graph for a window and its features.
pub fn build_graph(
    window: &Window,
    features: &FeatureMatrix,
    band: PlvBand,
) -> Result<GraphSample, ConnectivityError> {
    if features.values.len() != window.data.ncols() {
        return Err(ConnectivityError::ChannelMismatch(
            features.values.len(),
            window.data.ncols(),
        ));
    }
    Ok(GraphSample {
        subject_id: window.subject_id.clone(),
        window_index: window.index,
        label: window.label,
        node_features: features.clone(),
        plv: plv_matrix(window, band)?,
    })
}

/// Write one subject's graphs as JSON Lines (one object per window).
pub fn write_graphs_jsonl(samples: &[GraphSample], path: &Path) -> Result<(), ConnectivityError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for sample in samples {
        serde_json::to_writer(&mut out, sample)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Read a JSONL graph file.
pub fn read_graphs_jsonl(path: &Path) -> Result<Vec<GraphSample>, ConnectivityError> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut samples = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        samples.push(serde_json::from_str(&line)?);
    }
    Ok(samples)
}
