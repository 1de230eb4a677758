//! Overlapping window segmentation.

use ndarray::Array2;

use super::PreprocessError;
use crate::dataset::{ClassLabel, Recording};

/// One fixed-length, 14-channel segment of a recording.
#[derive(Clone, Debug)]
pub struct Window {
    pub subject_id: String,
    pub index: usize,
    /// `[win_samples x 14]`.
    pub data: Array2<f64>,
    pub label: ClassLabel,
    pub fs: f64,
}

/// Cut a recording into windows of `win_len_s` seconds sharing `overlap_s`
/// seconds between consecutive windows. Windows are exact slices; the
/// trailing remainder is dropped.
pub fn segment_windows(
    rec: &Recording,
    win_len_s: f64,
    overlap_s: f64,
    label: ClassLabel,
) -> Result<Vec<Window>, PreprocessError> {
    if !(win_len_s > overlap_s && overlap_s >= 0.0) {
        return Err(PreprocessError::InvalidParameter(format!(
            "need win_len_s > overlap_s >= 0, got {win_len_s} and {overlap_s}"
        )));
    }
    let win = (win_len_s * rec.fs).round() as usize;
    let stride = ((win_len_s - overlap_s) * rec.fs).round() as usize;
    if win == 0 || stride == 0 {
        return Err(PreprocessError::InvalidParameter(
            "window and stride must be at least one sample".to_string(),
        ));
    }
    let total = rec.n_samples();
    if total < win {
        return Err(PreprocessError::TooShort { got: total, need: win });
    }

    let count = (total - win) / stride + 1;
    let mut windows = Vec::with_capacity(count);
    for index in 0..count {
        let start = index * stride;
        windows.push(Window {
            subject_id: rec.subject_id.clone(),
            index,
            data: rec.data.slice(ndarray::s![start..start + win, ..]).to_owned(),
            label,
            fs: rec.fs,
        });
    }
    Ok(windows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{CANONICAL_CHANNELS, N_CHANNELS};

    fn ramp_recording(secs: f64) -> Recording {
        let n = (secs * 128.0).round() as usize;
        let data = Array2::from_shape_fn((n, N_CHANNELS), |(r, c)| (r * 100 + c) as f64);
        Recording {
            subject_id: "w".into(),
            channels: CANONICAL_CHANNELS.iter().map(|s| s.to_string()).collect(),
            data,
            fs: 128.0,
        }
    }

    #[test]
    fn counts_match_the_stride_formula() {
        let rec = ramp_recording(300.0);
        let windows = segment_windows(&rec, 5.0, 1.0, ClassLabel::Control).unwrap();
        assert_eq!(windows.len(), 74); // floor((300-5)/4) + 1
        for w in &windows {
            assert_eq!(w.data.nrows(), 640);
        }
    }

    #[test]
    fn exactly_one_window_fits() {
        let rec = ramp_recording(5.0);
        let windows = segment_windows(&rec, 5.0, 1.0, ClassLabel::Epilepsy).unwrap();
        assert_eq!(windows.len(), 1);
        assert_eq!(windows[0].label, ClassLabel::Epilepsy);
    }

    #[test]
    fn too_short_is_an_error() {
        let rec = ramp_recording(4.9);
        assert!(matches!(
            segment_windows(&rec, 5.0, 1.0, ClassLabel::Control),
            Err(PreprocessError::TooShort { .. })
        ));
    }

    #[test]
    fn windows_are_exact_slices() {
        let rec = ramp_recording(20.0);
        let windows = segment_windows(&rec, 5.0, 1.0, ClassLabel::Control).unwrap();
        let stride = 512; // 4 s
        for (i, w) in windows.iter().enumerate() {
            assert_eq!(w.index, i);
            for r in 0..w.data.nrows() {
                for c in 0..N_CHANNELS {
                    assert_eq!(w.data[[r, c]], rec.data[[i * stride + r, c]]);
                }
            }
        }
        // Concatenating strides reconstructs the covered prefix.
        let covered = (windows.len() - 1) * stride + 640;
        let mut rebuilt = Array2::zeros((covered, N_CHANNELS));
        for (i, w) in windows.iter().enumerate() {
            for r in 0..640 {
                for c in 0..N_CHANNELS {
                    rebuilt[[i * stride + r, c]] = w.data[[r, c]];
                }
            }
        }
        for r in 0..covered {
            for c in 0..N_CHANNELS {
                assert_eq!(rebuilt[[r, c]], rec.data[[r, c]]);
            }
        }
    }

    #[test]
    fn invalid_overlap_is_rejected() {
        let rec = ramp_recording(20.0);
        assert!(segment_windows(&rec, 5.0, 5.0, ClassLabel::Control).is_err());
        assert!(segment_windows(&rec, 5.0, -1.0, ClassLabel::Control).is_err());
    }
}
