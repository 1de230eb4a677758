//! Zero-phase Butterworth band-pass filtering.
//!
//! A 4th-order Butterworth low-pass prototype is transformed to a band-pass
//! (8 poles), discretized with the bilinear transform, realized as cascaded
//! biquads, and applied forward-backward with odd-extension padding and
//! steady-state initial conditions, so the net filter has zero phase.

use ndarray::Array2;
use num_complex::Complex64;

use super::PreprocessError;
use crate::dataset::Recording;

const PROTOTYPE_ORDER: usize = 4;

/// One second-order section, direct form II transposed.
#[derive(Clone, Copy, Debug)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2], // a0 normalized to 1
}

impl Biquad {
    /// Steady-state filter state for a unit-step input.
    fn step_state(&self) -> [f64; 2] {
        let k = (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1]);
        [k - self.b[0], self.b[2] - self.a[1] * k]
    }

    fn run(&self, x: &[f64], init_scale: f64, out: &mut Vec<f64>) {
        let zi = self.step_state();
        let mut z1 = zi[0] * init_scale;
        let mut z2 = zi[1] * init_scale;
        out.clear();
        out.reserve(x.len());
        for &v in x {
            let y = self.b[0] * v + z1;
            z1 = self.b[1] * v - self.a[0] * y + z2;
            z2 = self.b[2] * v - self.a[1] * y;
            out.push(y);
        }
    }

    fn response(&self, z: Complex64) -> Complex64 {
        let num = self.b[0] * z * z + self.b[1] * z + self.b[2];
        let den = z * z + self.a[0] * z + self.a[1];
        num / den
    }
}

/// Designed band-pass filter as a biquad cascade.
#[derive(Clone, Debug)]
pub struct BandpassFilter {
    sections: Vec<Biquad>,
    fs: f64,
}

impl BandpassFilter {
    /// Design for the band `[low, high]` Hz at sampling rate `fs`.
    pub fn design(low: f64, high: f64, fs: f64) -> Result<Self, PreprocessError> {
        if !(low > 0.0 && low < high && high < fs / 2.0) {
            return Err(PreprocessError::InvalidBand { low, high, fs });
        }

        // Prewarped analog band edges.
        let fs2 = 2.0 * fs;
        let w1 = fs2 * (std::f64::consts::PI * low / fs).tan();
        let w2 = fs2 * (std::f64::consts::PI * high / fs).tan();
        let bw = w2 - w1;
        let w0 = (w1 * w2).sqrt();

        // Butterworth low-pass prototype poles on the unit circle.
        let n = PROTOTYPE_ORDER;
        let mut analog_poles = Vec::with_capacity(2 * n);
        for k in 0..n {
            let theta = std::f64::consts::PI * (2.0 * k as f64 + 1.0 + n as f64) / (2.0 * n as f64);
            let p = Complex64::new(theta.cos(), theta.sin());
            // Low-pass -> band-pass doubles each pole:
            // p' = p*bw/2 +/- sqrt((p*bw/2)^2 - w0^2)
            let half = p * (bw / 2.0);
            let root = (half * half - Complex64::new(w0 * w0, 0.0)).sqrt();
            analog_poles.push(half + root);
            analog_poles.push(half - root);
        }

        // Bilinear transform. Band-pass zeros: n at s=0 -> z=1, and the n-fold
        // degree deficit becomes zeros at z=-1.
        let digital_poles: Vec<Complex64> =
            analog_poles.iter().map(|&p| (Complex64::new(fs2, 0.0) + p) / (Complex64::new(fs2, 0.0) - p)).collect();

        // Overall gain from the bilinear transform of H(s) = bw^n / prod(s - p).
        let mut gain = Complex64::new(bw.powi(n as i32), 0.0);
        for &p in &analog_poles {
            gain *= (Complex64::new(fs2, 0.0) - p).inv();
        }
        // Each s-plane zero at origin contributes (fs2 - 0) = fs2.
        gain *= Complex64::new(fs2.powi(n as i32), 0.0);
        let gain = gain.re;

        // Pair conjugate poles into biquads, each with zeros at +1 and -1.
        let mut upper: Vec<Complex64> =
            digital_poles.iter().copied().filter(|p| p.im > 0.0).collect();
        // Sections ordered from least to most resonant for numeric headroom.
        upper.sort_by(|x, y| {
            x.norm().partial_cmp(&y.norm()).expect("pole magnitudes are finite")
        });
        assert_eq!(upper.len(), n, "expected {n} conjugate pole pairs");

        let per_section_gain = gain.abs().powf(1.0 / n as f64);
        let gain_sign = gain.signum();
        let mut sections = Vec::with_capacity(n);
        for (i, p) in upper.iter().enumerate() {
            let sign = if i == 0 { gain_sign } else { 1.0 };
            let g = per_section_gain * sign;
            sections.push(Biquad {
                b: [g, 0.0, -g],
                a: [-2.0 * p.re, p.norm_sqr()],
            });
        }
        Ok(Self { sections, fs })
    }

    /// Complex frequency response of a single pass at `freq_hz`.
    pub fn response_at(&self, freq_hz: f64) -> Complex64 {
        let omega = std::f64::consts::TAU * freq_hz / self.fs;
        let z = Complex64::new(omega.cos(), omega.sin());
        self.sections.iter().map(|s| s.response(z)).product()
    }

    /// Magnitude of the zero-phase (forward-backward) response at `freq_hz`.
    pub fn zero_phase_gain(&self, freq_hz: f64) -> f64 {
        self.response_at(freq_hz).norm_sqr()
    }

    /// Zero-phase filtering of one channel.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        let pad = (6 * self.sections.len() + 3).min(x.len().saturating_sub(1));
        let mut ext = Vec::with_capacity(x.len() + 2 * pad);
        for i in (1..=pad).rev() {
            ext.push(2.0 * x[0] - x[i]);
        }
        ext.extend_from_slice(x);
        let last = *x.last().expect("filtfilt input is non-empty");
        for i in 1..=pad {
            ext.push(2.0 * last - x[x.len() - 1 - i]);
        }

        let mut buf = Vec::new();
        // Forward pass through the cascade.
        for s in &self.sections {
            s.run(&ext, ext[0], &mut buf);
            std::mem::swap(&mut ext, &mut buf);
        }
        // Backward pass.
        ext.reverse();
        for s in &self.sections {
            s.run(&ext, ext[0], &mut buf);
            std::mem::swap(&mut ext, &mut buf);
        }
        ext.reverse();
        ext[pad..pad + x.len()].to_vec()
    }
}

/// Zero-phase band-pass of every channel. Output length equals input length;
/// DC is removed by construction.
pub fn bandpass_filter(
    rec: &Recording,
    low: f64,
    high: f64,
) -> Result<Recording, PreprocessError> {
    let filter = BandpassFilter::design(low, high, rec.fs)?;
    let n = rec.n_samples();
    let mut out = Array2::zeros((n, rec.channels.len()));
    for ch in 0..rec.channels.len() {
        let x: Vec<f64> = rec.data.column(ch).to_vec();
        let y = filter.filtfilt(&x);
        for (r, v) in y.into_iter().enumerate() {
            out[[r, ch]] = v;
        }
    }
    Ok(Recording {
        subject_id: rec.subject_id.clone(),
        channels: rec.channels.clone(),
        data: out,
        fs: rec.fs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{CANONICAL_CHANNELS, N_CHANNELS};

    fn recording_from_channel(signal: &[f64]) -> Recording {
        let mut data = Array2::zeros((signal.len(), N_CHANNELS));
        for (r, &v) in signal.iter().enumerate() {
            for c in 0..N_CHANNELS {
                data[[r, c]] = v;
            }
        }
        Recording {
            subject_id: "t".into(),
            channels: CANONICAL_CHANNELS.iter().map(|s| s.to_string()).collect(),
            data,
            fs: 128.0,
        }
    }

    fn sine(freq: f64, secs: f64, fs: f64) -> Vec<f64> {
        let n = (secs * fs) as usize;
        (0..n).map(|t| (std::f64::consts::TAU * freq * t as f64 / fs).sin()).collect()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    #[test]
    fn dc_is_removed() {
        let rec = recording_from_channel(&vec![1.0; 1280]);
        let out = bandpass_filter(&rec, 0.5, 45.0).unwrap();
        let y: Vec<f64> = out.data.column(0).to_vec();
        assert!(rms(&y) < 1e-3, "DC rms {}", rms(&y));
    }

    #[test]
    fn passband_gain_near_unity_at_10hz() {
        let fs = 128.0;
        let x = sine(10.0, 300.0, fs);
        let rec = recording_from_channel(&x);
        let out = bandpass_filter(&rec, 0.5, 45.0).unwrap();
        // Trim 10% from each edge, then estimate amplitude from RMS so the
        // slowly decaying low-corner transient does not bias a peak reading.
        let trim = x.len() / 10;
        let y: Vec<f64> = out.data.column(0).to_vec()[trim..x.len() - trim].to_vec();
        let amp = rms(&y) * std::f64::consts::SQRT_2;
        assert!((0.95..=1.05).contains(&amp), "steady-state amplitude {amp}");

        // The derived oracle: designed response magnitude at 10 Hz.
        let filter = BandpassFilter::design(0.5, 45.0, fs).unwrap();
        let gain = filter.zero_phase_gain(10.0);
        assert!((0.95..=1.05).contains(&gain), "design gain {gain}");
        assert!((amp - gain).abs() < 0.02, "measured {amp} vs designed {gain}");
    }

    #[test]
    fn stopband_attenuation_at_60hz() {
        let filter = BandpassFilter::design(0.5, 45.0, 128.0).unwrap();
        let gain_db = 20.0 * filter.zero_phase_gain(60.0).log10();
        assert!(gain_db <= -20.0, "60 Hz attenuation only {gain_db} dB");

        // And on an actual signal.
        let x = sine(60.0, 30.0, 128.0);
        let rec = recording_from_channel(&x);
        let out = bandpass_filter(&rec, 0.5, 45.0).unwrap();
        let trim = 256;
        let y: Vec<f64> = out.data.column(0).to_vec()[trim..x.len() - trim].to_vec();
        let att_db = 20.0 * (rms(&y) / rms(&x[trim..x.len() - trim])).log10();
        assert!(att_db <= -20.0, "measured attenuation {att_db} dB");
    }

    #[test]
    fn output_length_matches_input() {
        let rec = recording_from_channel(&sine(5.0, 7.3, 128.0));
        let out = bandpass_filter(&rec, 0.5, 45.0).unwrap();
        assert_eq!(out.n_samples(), rec.n_samples());
    }

    #[test]
    fn invalid_band_is_rejected() {
        let rec = recording_from_channel(&sine(5.0, 2.0, 128.0));
        assert!(matches!(
            bandpass_filter(&rec, 45.0, 0.5),
            Err(PreprocessError::InvalidBand { .. })
        ));
        assert!(matches!(
            bandpass_filter(&rec, 0.5, 64.0),
            Err(PreprocessError::InvalidBand { .. })
        ));
        assert!(matches!(
            bandpass_filter(&rec, 0.0, 45.0),
            Err(PreprocessError::InvalidBand { .. })
        ));
    }

    #[test]
    fn filtering_is_linear() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let n = 1024;
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (a, b) = (1.7, -0.6);
        let combo: Vec<f64> = x.iter().zip(&y).map(|(&xv, &yv)| a * xv + b * yv).collect();

        let filter = BandpassFilter::design(0.5, 45.0, 128.0).unwrap();
        let fx = filter.filtfilt(&x);
        let fy = filter.filtfilt(&y);
        let fc = filter.filtfilt(&combo);
        for i in 0..n {
            assert!((fc[i] - (a * fx[i] + b * fy[i])).abs() < 1e-9, "at {i}");
        }
    }
}
