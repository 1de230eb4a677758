//! Recording and manifest loading plus the synthetic dataset generator.
//!
//! Recordings ship as one headered CSV per subject. The loader selects the
//! 14 canonical channels by header name (never by position) and reorders
//! them canonically, so permuting input columns yields an identical
//! [`Recording`].

use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{channel_index, derive_seed, CANONICAL_CHANNELS, N_CHANNELS};

/// Class label of a subject.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Control,
    Epilepsy,
}

impl ClassLabel {
    /// Class index used by the models (epilepsy is the positive class 1).
    pub fn index(self) -> usize {
        match self {
            ClassLabel::Control => 0,
            ClassLabel::Epilepsy => 1,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "control" => Some(ClassLabel::Control),
            "epilepsy" => Some(ClassLabel::Epilepsy),
            _ => None,
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassLabel::Control => write!(f, "control"),
            ClassLabel::Epilepsy => write!(f, "epilepsy"),
        }
    }
}

/// A multichannel EEG time series in canonical channel order.
#[derive(Clone, Debug)]
pub struct Recording {
    pub subject_id: String,
    /// Channel labels; always the canonical 14 in canonical order.
    pub channels: Vec<String>,
    /// `[n_samples x 14]` microvolt samples.
    pub data: Array2<f64>,
    /// Sampling rate in Hz.
    pub fs: f64,
}

impl Recording {
    pub fn n_samples(&self) -> usize {
        self.data.nrows()
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.fs
    }
}

/// One dataset manifest row.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub file: PathBuf,
    pub label: ClassLabel,
    pub country: String,
    pub protocol: String,
}

/// Validated list of subjects with unique ids and existing files.
#[derive(Clone, Debug, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("canonical channel {0} missing from header")]
    MissingChannel(String),
    #[error("malformed row {0}: non-numeric or non-finite cell")]
    MalformedRow(usize),
    #[error("recording has no samples")]
    EmptyRecording,
    #[error("duplicate subject id {0}")]
    DuplicateSubject(String),
    #[error("unknown label {0:?} (expected control or epilepsy)")]
    UnknownLabel(String),
    #[error("manifest references missing file {0}")]
    MissingFile(PathBuf),
    #[error("manifest missing column {0}")]
    MissingColumn(String),
    #[error("invalid synthetic dataset spec: {0}")]
    InvalidSpec(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Load a recording CSV, selecting the canonical channels by header name.
///
/// Extra columns (gyro, quality flags, timestamps) are ignored. Cells must
/// parse as finite floats; NaN/inf are rejected rather than imputed.
pub fn load_recording(
    path: &Path,
    subject_id: &str,
    fs_expected: f64,
) -> Result<Recording, DataError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();

    // Position of each canonical channel in the file.
    let mut positions = [usize::MAX; N_CHANNELS];
    for (idx, name) in headers.iter().enumerate() {
        if let Some(ch) = channel_index(name) {
            positions[ch] = idx;
        }
    }
    for (ch, &pos) in positions.iter().enumerate() {
        if pos == usize::MAX {
            return Err(DataError::MissingChannel(CANONICAL_CHANNELS[ch].to_string()));
        }
    }

    let mut rows: Vec<[f64; N_CHANNELS]> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let mut row = [0.0; N_CHANNELS];
        for (ch, &pos) in positions.iter().enumerate() {
            let cell = record.get(pos).ok_or(DataError::MalformedRow(line + 2))?;
            let value: f64 = cell.parse().map_err(|_| DataError::MalformedRow(line + 2))?;
            if !value.is_finite() {
                return Err(DataError::MalformedRow(line + 2));
            }
            row[ch] = value;
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(DataError::EmptyRecording);
    }

    let mut data = Array2::zeros((rows.len(), N_CHANNELS));
    for (r, row) in rows.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            data[[r, c]] = v;
        }
    }
    Ok(Recording {
        subject_id: subject_id.to_string(),
        channels: CANONICAL_CHANNELS.iter().map(|s| s.to_string()).collect(),
        data,
        fs: fs_expected,
    })
}

/// Load and validate a manifest CSV with columns
/// `subject_id,file,label,country,protocol`.
///
/// Relative file paths are resolved against the manifest's directory, and
/// every referenced file must exist.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let c_subject = col("subject_id")?;
    let c_file = col("file")?;
    let c_label = col("label")?;
    let c_country = col("country")?;
    let c_protocol = col("protocol")?;

    let mut entries = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for record in reader.records() {
        let record = record?;
        let subject_id = record.get(c_subject).unwrap_or_default().to_string();
        if !seen.insert(subject_id.clone()) {
            return Err(DataError::DuplicateSubject(subject_id));
        }
        let raw_label = record.get(c_label).unwrap_or_default();
        let label = ClassLabel::parse(raw_label)
            .ok_or_else(|| DataError::UnknownLabel(raw_label.to_string()))?;
        let raw_file = PathBuf::from(record.get(c_file).unwrap_or_default());
        let file = if raw_file.is_absolute() { raw_file } else { base.join(raw_file) };
        if !file.exists() {
            return Err(DataError::MissingFile(file));
        }
        entries.push(ManifestEntry {
            subject_id,
            file,
            label,
            country: record.get(c_country).unwrap_or_default().to_string(),
            protocol: record.get(c_protocol).unwrap_or_default().to_string(),
        });
    }
    Ok(DatasetManifest { entries })
}

/// Write a manifest CSV next to its recordings.
pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), DataError> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["subject_id", "file", "label", "country", "protocol"])?;
    for e in &manifest.entries {
        writer.write_record([
            e.subject_id.as_str(),
            &e.file.to_string_lossy(),
            &e.label.to_string(),
            e.country.as_str(),
            e.protocol.as_str(),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

/// Write a recording as a canonical-header CSV.
pub fn write_recording(rec: &Recording, path: &Path) -> Result<(), DataError> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(CANONICAL_CHANNELS)?;
    let mut row = vec![String::new(); N_CHANNELS];
    for r in 0..rec.n_samples() {
        for c in 0..N_CHANNELS {
            row[c] = format!("{:.6}", rec.data[[r, c]]);
        }
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Channels carrying the constructed class signal: coupled pairs are drawn
/// from this fronto-temporal subset.
pub const COUPLED_CHANNELS: [&str; 6] = ["AF3", "AF4", "F3", "F4", "FC5", "FC6"];

/// Indices of [`COUPLED_CHANNELS`] in canonical order.
pub fn coupled_channel_indices() -> Vec<usize> {
    COUPLED_CHANNELS.iter().map(|c| channel_index(c).expect("canonical")).collect()
}

/// Knobs for the synthetic generator. Defaults suit fast end-to-end runs.
#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub fs: f64,
    pub duration_s: f64,
    /// Per-sample standard deviation of each independent phase walk, radians.
    pub phase_walk_std: f64,
    /// Additive white noise amplitude relative to unit band amplitudes.
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { fs: 128.0, duration_s: 40.0, phase_walk_std: 0.15, noise_std: 0.3 }
    }
}

// Band oscillations mixed into every channel: (center Hz, amplitude).
const BAND_COMPONENTS: [(f64, f64); 4] = [(2.0, 1.0), (6.0, 0.8), (10.0, 1.2), (20.0, 0.6)];

/// Generate a labeled synthetic dataset with an even class split.
///
/// Every channel is a sum of band-limited oscillations with randomly
/// drifting phase plus white noise. For epilepsy-class subjects the channels
/// in [`COUPLED_CHANNELS`] blend their phase trajectories with a shared
/// process, with blend weight `class_effect`; `class_effect = 0` makes the
/// classes statistically identical. Deterministic given the seed.
pub fn generate_synthetic_dataset(
    n_subjects: usize,
    class_effect: f64,
    seed: u64,
) -> Result<(Vec<Recording>, DatasetManifest), DataError> {
    generate_synthetic_dataset_with(n_subjects, class_effect, seed, &SynthConfig::default())
}

/// [`generate_synthetic_dataset`] with explicit generator knobs.
pub fn generate_synthetic_dataset_with(
    n_subjects: usize,
    class_effect: f64,
    seed: u64,
    cfg: &SynthConfig,
) -> Result<(Vec<Recording>, DatasetManifest), DataError> {
    if n_subjects < 2 {
        return Err(DataError::InvalidSpec(format!(
            "need at least 2 subjects, got {n_subjects}"
        )));
    }
    if n_subjects % 2 != 0 {
        return Err(DataError::InvalidSpec(format!(
            "need an even class split, got {n_subjects} subjects"
        )));
    }
    if !(0.0..=1.0).contains(&class_effect) {
        return Err(DataError::InvalidSpec(format!(
            "class_effect must be in [0, 1], got {class_effect}"
        )));
    }

    let coupled = coupled_channel_indices();
    let mut recordings = Vec::with_capacity(n_subjects);
    let mut entries = Vec::with_capacity(n_subjects);
    for s in 0..n_subjects {
        let label = if s % 2 == 0 { ClassLabel::Control } else { ClassLabel::Epilepsy };
        let effect = if label == ClassLabel::Epilepsy { class_effect } else { 0.0 };
        let subject_id = format!("s{s:02}");
        let rec = synth_recording(
            &subject_id,
            effect,
            &coupled,
            derive_seed(seed, "subject", s as u64),
            cfg,
        );
        recordings.push(rec);
        entries.push(ManifestEntry {
            subject_id,
            file: PathBuf::from(format!("s{s:02}.csv")),
            label,
            country: "synthetic".to_string(),
            protocol: "resting".to_string(),
        });
    }
    Ok((recordings, DatasetManifest { entries }))
}

fn synth_recording(
    subject_id: &str,
    effect: f64,
    coupled: &[usize],
    seed: u64,
    cfg: &SynthConfig,
) -> Recording {
    let n = (cfg.duration_s * cfg.fs).round() as usize;
    let n_bands = BAND_COMPONENTS.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Shared phase trajectories, one per band, used by coupled channels.
    let mut shared = vec![vec![0.0; n]; n_bands];
    for traj in shared.iter_mut() {
        let mut phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        for p in traj.iter_mut() {
            *p = phase;
            phase += gaussian(&mut rng) * cfg.phase_walk_std;
        }
    }

    let mut data = Array2::zeros((n, N_CHANNELS));
    for ch in 0..N_CHANNELS {
        let blend = if coupled.contains(&ch) { effect } else { 0.0 };
        for (b, &(freq, amp)) in BAND_COMPONENTS.iter().enumerate() {
            let mut own: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            for (t, sample) in data.column_mut(ch).iter_mut().enumerate() {
                let phase = blend * shared[b][t] + (1.0 - blend) * own;
                let arg = std::f64::consts::TAU * freq * t as f64 / cfg.fs + phase;
                *sample += amp * arg.sin();
                own += gaussian(&mut rng) * cfg.phase_walk_std;
            }
        }
        for sample in data.column_mut(ch).iter_mut() {
            // 20 uV-ish scale keeps the files looking like real EEG.
            *sample = 20.0 * (*sample + cfg.noise_std * gaussian(&mut rng));
        }
    }

    Recording {
        subject_id: subject_id.to_string(),
        channels: CANONICAL_CHANNELS.iter().map(|s| s.to_string()).collect(),
        data,
        fs: cfg.fs,
    }
}

/// Standard normal draw via Box-Muller; keeps the generator independent of
/// distribution-crate version details.
fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.gen_range(f64::EPSILON..1.0);
        let v: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let g = (-2.0 * u.ln()).sqrt() * v.cos();
        if g.is_finite() {
            return g;
        }
    }
}
