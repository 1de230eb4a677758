//! PCA-reduced FastICA cleaning.
//!
//! The recording is centered, reduced to `n_components` principal
//! components, unmixed with symmetric FastICA (tanh contrast), optionally
//! stripped of high-kurtosis components, and reconstructed back to all 14
//! channels. With rejection off the round trip equals the rank-limited PCA
//! projection of the input.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::PreprocessError;
use crate::dataset::Recording;

/// FastICA iteration settings.
#[derive(Clone, Debug)]
pub struct FastIcaOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Components with sample kurtosis above this are zeroed when rejection
    /// is enabled (blink/motion heuristic).
    pub kurtosis_threshold: f64,
    pub seed: u64,
}

impl Default for FastIcaOptions {
    fn default() -> Self {
        Self { tolerance: 1e-4, max_iterations: 500, kurtosis_threshold: 5.0, seed: 0 }
    }
}

/// Jacobi eigendecomposition of a symmetric matrix.
///
/// Returns (eigenvalues, eigenvectors as columns), sorted descending.
pub(crate) fn symmetric_eig(m: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "matrix must be square");
    let mut a = m.clone();
    let mut v = Array2::eye(n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[[p, q]] * a[[p, q]];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[j, j]].partial_cmp(&a[[i, i]]).expect("finite eigenvalues"));
    let values = Array1::from_iter(order.iter().map(|&i| a[[i, i]]));
    let mut vectors = Array2::zeros((n, n));
    for (out_col, &in_col) in order.iter().enumerate() {
        for r in 0..n {
            vectors[[r, out_col]] = v[[r, in_col]];
        }
    }
    (values, vectors)
}

/// `M^{-1/2}` for a symmetric positive-definite matrix.
fn inverse_sqrt(m: &Array2<f64>) -> Array2<f64> {
    let (values, vectors) = symmetric_eig(m);
    let n = m.nrows();
    let mut scaled = Array2::zeros((n, n));
    for c in 0..n {
        let inv = 1.0 / values[c].max(1e-18).sqrt();
        for r in 0..n {
            scaled[[r, c]] = vectors[[r, c]] * inv;
        }
    }
    scaled.dot(&vectors.t())
}

fn sample_kurtosis(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let m2 = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m4 = x.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    if m2 <= 0.0 {
        return 0.0;
    }
    m4 / (m2 * m2) - 3.0
}

/// PCA-reduce to `n_components`, run FastICA, optionally zero out
/// high-kurtosis components, and reconstruct 14 channels.
pub fn fast_ica_clean(
    rec: &Recording,
    n_components: usize,
    reject: bool,
    opts: &FastIcaOptions,
) -> Result<Recording, PreprocessError> {
    let n_channels = rec.channels.len();
    let n_samples = rec.n_samples();
    if n_components == 0 || n_components > n_channels {
        return Err(PreprocessError::InvalidParameter(format!(
            "n_components must be in 1..={n_channels}, got {n_components}"
        )));
    }
    if n_samples < 8 * n_components {
        return Err(PreprocessError::TooShort { got: n_samples, need: 8 * n_components });
    }

    // Center.
    let means = rec.data.mean_axis(Axis(0)).expect("non-empty recording");
    let mut centered = rec.data.clone();
    for mut row in centered.rows_mut() {
        row -= &means;
    }

    // PCA whitening from the channel covariance.
    let cov = centered.t().dot(&centered) / n_samples as f64;
    let (values, vectors) = symmetric_eig(&cov);
    let basis = vectors.slice(ndarray::s![.., ..n_components]); // [ch, comp]
    let scale: Vec<f64> = (0..n_components).map(|i| values[i].max(1e-18).sqrt()).collect();

    // Whitened components, [comp, samples].
    let mut whitened = basis.t().dot(&centered.t());
    for (i, row) in whitened.rows_mut().into_iter().enumerate() {
        let s = scale[i];
        for v in row {
            *v /= s;
        }
    }

    // Symmetric FastICA with tanh contrast.
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut unmix = Array2::from_shape_fn((n_components, n_components), |_| {
        rng.gen_range(-1.0..1.0)
    });
    unmix = inverse_sqrt(&unmix.dot(&unmix.t())).dot(&unmix);

    let mut converged = false;
    let mut iterations = 0;
    for it in 0..opts.max_iterations {
        iterations = it + 1;
        let projected = unmix.dot(&whitened); // [comp, samples]
        let g = projected.mapv(f64::tanh);
        let g_prime_mean: Vec<f64> = g
            .rows()
            .into_iter()
            .map(|row| row.iter().map(|&v| 1.0 - v * v).sum::<f64>() / n_samples as f64)
            .collect();
        let mut updated = g.dot(&whitened.t()) / n_samples as f64;
        for (i, mut row) in updated.rows_mut().into_iter().enumerate() {
            let (gp, w_row) = (g_prime_mean[i], unmix.row(i));
            for (u, &w) in row.iter_mut().zip(w_row.iter()) {
                *u -= gp * w;
            }
        }
        let updated = inverse_sqrt(&updated.dot(&updated.t())).dot(&updated);

        // Convergence: every unmixing direction stable up to sign.
        let agreement = updated.dot(&unmix.t());
        let drift = (0..n_components)
            .map(|i| (agreement[[i, i]].abs() - 1.0).abs())
            .fold(0.0f64, f64::max);
        unmix = updated;
        if drift < opts.tolerance {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(PreprocessError::NoConvergence(iterations));
    }

    // Sources and optional rejection.
    let mut sources = unmix.dot(&whitened); // [comp, samples]
    if reject {
        for mut row in sources.rows_mut() {
            let kurt = sample_kurtosis(row.as_slice().expect("contiguous row"));
            if kurt > opts.kurtosis_threshold {
                row.fill(0.0);
            }
        }
    }

    // Reconstruct: invert ICA rotation (orthogonal), unwhiten, unproject.
    let mut back = unmix.t().dot(&sources); // whitened space
    for (i, row) in back.rows_mut().into_iter().enumerate() {
        let s = scale[i];
        for v in row {
            *v *= s;
        }
    }
    let mut restored = basis.dot(&back).t().to_owned(); // [samples, ch]
    for mut row in restored.rows_mut() {
        row += &means;
    }

    Ok(Recording {
        subject_id: rec.subject_id.clone(),
        channels: rec.channels.clone(),
        data: restored,
        fs: rec.fs,
    })
}

/// Rank-limited PCA projection (plus mean), the reference reconstruction for
/// `fast_ica_clean` with rejection off.
#[cfg(test)]
pub(crate) fn pca_projection(rec: &Recording, n_components: usize) -> Array2<f64> {
    let n_samples = rec.n_samples();
    let means = rec.data.mean_axis(Axis(0)).expect("non-empty recording");
    let mut centered = rec.data.clone();
    for mut row in centered.rows_mut() {
        row -= &means;
    }
    let cov = centered.t().dot(&centered) / n_samples as f64;
    let (_, vectors) = symmetric_eig(&cov);
    let basis = vectors.slice(ndarray::s![.., ..n_components]);
    let mut projected = centered.dot(&basis).dot(&basis.t());
    for mut row in projected.rows_mut() {
        row += &means;
    }
    projected
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{CANONICAL_CHANNELS, N_CHANNELS};

    fn recording(data: Array2<f64>) -> Recording {
        Recording {
            subject_id: "t".into(),
            channels: CANONICAL_CHANNELS.iter().map(|s| s.to_string()).collect(),
            data,
            fs: 128.0,
        }
    }

    fn max_rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let scale = b.iter().fold(0.0f64, |m, &v| m.max(v.abs())).max(1e-12);
        a.iter()
            .zip(b.iter())
            .map(|(&x, &y)| (x - y).abs() / scale)
            .fold(0.0, f64::max)
    }

    #[test]
    fn jacobi_recovers_known_spectrum() {
        use ndarray::array;
        let m = array![[4.0, 1.0, 0.0], [1.0, 3.0, 1.0], [0.0, 1.0, 2.0]];
        let (values, vectors) = symmetric_eig(&m);
        // Reconstruct and compare.
        let mut recon = Array2::<f64>::zeros((3, 3));
        for k in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    recon[[i, j]] += values[k] * vectors[[i, k]] * vectors[[j, k]];
                }
            }
        }
        assert!(max_rel_err(&recon, &m) < 1e-10);
        assert!(values[0] >= values[1] && values[1] >= values[2]);
    }

    fn mixed_sources(n: usize) -> (Array2<f64>, Array2<f64>) {
        // Three deterministic non-Gaussian sources.
        let t: Vec<f64> = (0..n).map(|i| i as f64 / 128.0).collect();
        let mut sources = Array2::zeros((3, n));
        for (i, &tv) in t.iter().enumerate() {
            sources[[0, i]] = (2.0 * std::f64::consts::TAU * tv).sin();
            sources[[1, i]] = ((5.1 * tv).fract() * 2.0 - 1.0) as f64; // sawtooth
            sources[[2, i]] = if (3.3 * tv).fract() < 0.5 { 1.0 } else { -1.0 }; // square
        }
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mixing = Array2::from_shape_fn((N_CHANNELS, 3), |_| rng.gen_range(-1.0..1.0));
        let data = mixing.dot(&sources).t().to_owned();
        (sources, data)
    }

    #[test]
    fn roundtrip_without_rejection_equals_pca_projection() {
        let (_, data) = mixed_sources(2048);
        // Add a little noise so the covariance has full numerical rank.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noisy = data.mapv(|v| v + 0.01 * rng.gen_range(-1.0..1.0));
        let rec = recording(noisy);
        let cleaned = fast_ica_clean(&rec, 10, false, &FastIcaOptions::default()).unwrap();
        let reference = pca_projection(&rec, 10);
        assert!(
            max_rel_err(&cleaned.data, &reference) < 1e-6,
            "err {}",
            max_rel_err(&cleaned.data, &reference)
        );
    }

    #[test]
    fn recovers_independent_sources() {
        let (sources, data) = mixed_sources(4096);
        let rec = recording(data);

        // Run the unmixing at the true dimensionality and compare recovered
        // components to the ground-truth sources after permutation/sign match.
        let n = rec.n_samples();
        let means = rec.data.mean_axis(Axis(0)).unwrap();
        let mut centered = rec.data.clone();
        for mut row in centered.rows_mut() {
            row -= &means;
        }
        let cleaned = fast_ica_clean(&rec, 3, false, &FastIcaOptions::default()).unwrap();
        assert_eq!(cleaned.n_samples(), n);

        // Recompute sources the way fast_ica_clean does (reject=false keeps
        // reconstruction equal to PCA, so probe separation via correlation of
        // recovered components against the truth).
        let rec2 = recording(rec.data.clone());
        let comps = ica_components(&rec2, 3);
        let mut best = [0.0f64; 3];
        for (i, truth) in sources.rows().into_iter().enumerate() {
            for comp in comps.rows() {
                let c = correlation(truth.as_slice().unwrap(), comp.as_slice().unwrap()).abs();
                best[i] = best[i].max(c);
            }
        }
        for (i, b) in best.iter().enumerate() {
            assert!(*b >= 0.95, "source {i} best |corr| {b}");
        }
    }

    // Test-only helper: expose the unmixed components.
    fn ica_components(rec: &Recording, n_components: usize) -> Array2<f64> {
        let n_samples = rec.n_samples();
        let means = rec.data.mean_axis(Axis(0)).unwrap();
        let mut centered = rec.data.clone();
        for mut row in centered.rows_mut() {
            row -= &means;
        }
        let cov = centered.t().dot(&centered) / n_samples as f64;
        let (values, vectors) = symmetric_eig(&cov);
        let basis = vectors.slice(ndarray::s![.., ..n_components]);
        let mut whitened = basis.t().dot(&centered.t());
        for (i, row) in whitened.rows_mut().into_iter().enumerate() {
            let s = values[i].max(1e-18).sqrt();
            for v in row {
                *v /= s;
            }
        }
        let opts = FastIcaOptions::default();
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut unmix =
            Array2::from_shape_fn((n_components, n_components), |_| rng.gen_range(-1.0..1.0));
        unmix = inverse_sqrt(&unmix.dot(&unmix.t())).dot(&unmix);
        for _ in 0..opts.max_iterations {
            let projected = unmix.dot(&whitened);
            let g = projected.mapv(f64::tanh);
            let g_prime_mean: Vec<f64> = g
                .rows()
                .into_iter()
                .map(|row| row.iter().map(|&v| 1.0 - v * v).sum::<f64>() / n_samples as f64)
                .collect();
            let mut updated = g.dot(&whitened.t()) / n_samples as f64;
            for (i, mut row) in updated.rows_mut().into_iter().enumerate() {
                let (gp, w_row) = (g_prime_mean[i], unmix.row(i));
                for (u, &w) in row.iter_mut().zip(w_row.iter()) {
                    *u -= gp * w;
                }
            }
            let updated = inverse_sqrt(&updated.dot(&updated.t())).dot(&updated);
            let agreement = updated.dot(&unmix.t());
            let drift = (0..n_components)
                .map(|i| (agreement[[i, i]].abs() - 1.0).abs())
                .fold(0.0f64, f64::max);
            unmix = updated;
            if drift < opts.tolerance {
                break;
            }
        }
        unmix.dot(&whitened)
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for (&x, &y) in a.iter().zip(b) {
            cov += (x - ma) * (y - mb);
            va += (x - ma) * (x - ma);
            vb += (y - mb) * (y - mb);
        }
        cov / (va.sqrt() * vb.sqrt()).max(1e-300)
    }

    #[test]
    fn gaussian_noise_refuses_or_roundtrips() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let data = Array2::from_shape_fn((2048, N_CHANNELS), |_| {
            // Box-Muller standard normal
            let u: f64 = rng.gen_range(f64::EPSILON..1.0);
            let v: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            (-2.0 * u.ln()).sqrt() * v.cos()
        });
        let rec = recording(data);
        match fast_ica_clean(&rec, 10, false, &FastIcaOptions::default()) {
            Ok(cleaned) => {
                let reference = pca_projection(&rec, 10);
                assert!(max_rel_err(&cleaned.data, &reference) < 1e-6);
            }
            Err(PreprocessError::NoConvergence(_)) => {} // acceptable on pure noise
            Err(other) => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_component_counts() {
        let (_, data) = mixed_sources(512);
        let rec = recording(data);
        assert!(fast_ica_clean(&rec, 0, false, &FastIcaOptions::default()).is_err());
        assert!(fast_ica_clean(&rec, 15, false, &FastIcaOptions::default()).is_err());
    }
}
