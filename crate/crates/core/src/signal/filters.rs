//! Spectral filtering, line-noise detection, resampling and normalisation.
//!
//! All filters act on each channel independently through a forward FFT,
//! a real-valued frequency gain, and an inverse FFT.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::recording::EegRecording;
use crate::error::{Error, Result};

/// Width of the raised-cosine band edges, Hz.
pub const TRANSITION_HZ: f64 = 1.0;
/// Detection threshold relative to the 20–90 Hz median magnitude.
pub const LINE_NOISE_RATIO: f64 = 5.0;
const DEGENERATE_STD: f64 = 1e-9;

pub(crate) fn fft(x: &[f64]) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    if !buf.is_empty() {
        FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    }
    buf
}

/// Unnormalised inverse FFT, real part only.
pub(crate) fn ifft_real(mut spec: Vec<Complex64>) -> Vec<f64> {
    if spec.is_empty() {
        return Vec::new();
    }
    FftPlanner::new().plan_fft_inverse(spec.len()).process(&mut spec);
    spec.into_iter().map(|c| c.re).collect()
}

/// Frequency (Hz, non-negative) represented by FFT bin `k` of an `n`-point transform.
fn bin_freq(k: usize, n: usize, rate: f64) -> f64 {
    k.min(n - k) as f64 * rate / n as f64
}

fn apply_gain(rec: &EegRecording, gain: impl Fn(f64) -> f64) -> EegRecording {
    let rate = rec.sample_rate;
    let samples = rec
        .samples
        .iter()
        .map(|row| {
            let n = row.len();
            let mut spec = fft(row);
            for (k, c) in spec.iter_mut().enumerate() {
                *c *= gain(bin_freq(k, n, rate));
            }
            ifft_real(spec).into_iter().map(|v| v / n as f64).collect()
        })
        .collect();
    rec.with_samples(samples, rate)
}

fn raised_cosine(t: f64) -> f64 {
    0.5 * (1.0 - (PI * t.clamp(0.0, 1.0)).cos())
}

/// Pass-band gain: unity on `[low, high]`, raised-cosine edges of width
/// `min(1 Hz, low)` below and 1 Hz above, zero beyond.
pub fn bandpass_gain(f: f64, low: f64, high: f64) -> f64 {
    let w_lo = TRANSITION_HZ.min(low);
    if f < low - w_lo {
        0.0
    } else if f < low {
        raised_cosine((f - (low - w_lo)) / w_lo)
    } else if f <= high {
        1.0
    } else if f < high + TRANSITION_HZ {
        1.0 - raised_cosine((f - high) / TRANSITION_HZ)
    } else {
        0.0
    }
}

/// Stop-band gain: zero within 1 Hz of `centre`, raised-cosine back to unity by 2 Hz.
pub fn notch_gain(f: f64, centre: f64) -> f64 {
    let d = (f - centre).abs();
    if d <= TRANSITION_HZ {
        0.0
    } else {
        raised_cosine((d - TRANSITION_HZ) / TRANSITION_HZ)
    }
}

pub fn bandpass(rec: &EegRecording, low: f64, high: f64) -> Result<EegRecording> {
    let nyquist = rec.sample_rate / 2.0;
    if !(0.0 < low && low < high && high < nyquist) {
        return Err(Error::Config(format!(
            "band-pass needs 0 < low < high < rate/2; got [{low}, {high}] at {} Hz",
            rec.sample_rate
        )));
    }
    Ok(apply_gain(rec, |f| bandpass_gain(f, low, high)))
}

pub fn notch(rec: &EegRecording, freq: f64) -> Result<EegRecording> {
    if !(freq > 0.0 && freq < rec.sample_rate / 2.0) {
        return Err(Error::Config(format!(
            "notch frequency {freq} Hz must lie in (0, {})",
            rec.sample_rate / 2.0
        )));
    }
    Ok(apply_gain(rec, |f| notch_gain(f, freq)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineNoise {
    /// 50 or 60 when interference was found.
    pub frequency: Option<f64>,
    /// True when the sample rate made 60 Hz unobservable, so only 50 Hz was tested.
    pub limited: bool,
}

/// Mean FFT magnitude over channels, `(freqs, mags)` for bins `0..=n/2`.
pub fn mean_magnitude_spectrum(rec: &EegRecording) -> (Vec<f64>, Vec<f64>) {
    let n = rec.len();
    let half = n / 2;
    let mut mags = vec![0.0; half + 1];
    for row in &rec.samples {
        for (k, c) in fft(row).iter().take(half + 1).enumerate() {
            mags[k] += c.norm() / rec.channels() as f64;
        }
    }
    let freqs = (0..=half).map(|k| k as f64 * rec.sample_rate / n as f64).collect();
    (freqs, mags)
}

/// Looks for power-line interference at 50 or 60 Hz.
///
/// A candidate is reported when the mean magnitude within ±1 Hz exceeds
/// [`LINE_NOISE_RATIO`] times the median magnitude of the 20–90 Hz band
/// (clipped to Nyquist). If both qualify the stronger one wins.
pub fn detect_line_noise(rec: &EegRecording) -> Result<LineNoise> {
    if rec.duration_secs() < 2.0 {
        return Err(Error::EmptySample(format!(
            "line-noise detection needs at least 2 s of signal, got {:.3} s",
            rec.duration_secs()
        )));
    }
    let nyquist = rec.sample_rate / 2.0;
    let limited = rec.sample_rate < 130.0;
    if limited {
        log::warn!("sample rate {} Hz cannot resolve 60 Hz; testing 50 Hz only", rec.sample_rate);
    }
    let (freqs, mags) = mean_magnitude_spectrum(rec);
    let mut band: Vec<f64> = freqs
        .iter()
        .zip(&mags)
        .filter(|(f, _)| **f >= 20.0 && **f <= 90.0f64.min(nyquist))
        .map(|(_, m)| *m)
        .collect();
    if band.is_empty() {
        return Ok(LineNoise { frequency: None, limited });
    }
    band.sort_by(f64::total_cmp);
    let median = if band.len() % 2 == 1 {
        band[band.len() / 2]
    } else {
        0.5 * (band[band.len() / 2 - 1] + band[band.len() / 2])
    };
    let candidates: &[f64] = if limited { &[50.0] } else { &[50.0, 60.0] };
    let mut best: Option<(f64, f64)> = None;
    for &c in candidates {
        let window: Vec<f64> = freqs
            .iter()
            .zip(&mags)
            .filter(|(f, _)| (**f - c).abs() <= 1.0)
            .map(|(_, m)| *m)
            .collect();
        if window.is_empty() {
            continue;
        }
        let mean = window.iter().sum::<f64>() / window.len() as f64;
        let ratio = mean / median.max(f64::MIN_POSITIVE);
        if ratio > LINE_NOISE_RATIO && best.is_none_or(|(_, r)| ratio > r) {
            best = Some((c, ratio));
        }
    }
    Ok(LineNoise {
        frequency: best.map(|(f, _)| f),
        limited,
    })
}

/// Fourier resampling to `target` Hz; output length `round(S·target/rate)`.
///
/// Content above the lower of the two Nyquist frequencies is discarded.
pub fn resample(rec: &EegRecording, target: f64) -> Result<EegRecording> {
    if !(target > 0.0) {
        return Err(Error::Config(format!("target rate must be positive, got {target}")));
    }
    if target == rec.sample_rate {
        return Ok(rec.clone());
    }
    let n_in = rec.len();
    let n_out = (n_in as f64 * target / rec.sample_rate).round() as usize;
    let samples = rec.samples.iter().map(|row| resample_row(row, n_out)).collect();
    Ok(rec.with_samples(samples, target))
}

fn resample_row(row: &[f64], n_out: usize) -> Vec<f64> {
    let n_in = row.len();
    if n_in == 0 || n_out == 0 {
        return vec![0.0; n_out];
    }
    let x = fft(row);
    let mut y = vec![Complex64::new(0.0, 0.0); n_out];
    let n = n_in.min(n_out);
    y[0] = x[0];
    for k in 1..=(n - 1) / 2 {
        y[k] = x[k];
        y[n_out - k] = x[n_in - k];
    }
    // An even-length upsample splits the input Nyquist bin between the two
    // mirrored positions; an even-length downsample drops it.
    if n.is_multiple_of(2) && n_out > n_in {
        let half = x[n / 2] * 0.5;
        y[n / 2] = half;
        y[n_out - n / 2] = half;
    }
    ifft_real(y).into_iter().map(|v| v / n_in as f64).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// Per-channel zero mean, unit (population) standard deviation.
    Zscore,
    /// Per-channel division by the 95th percentile of absolute amplitude.
    Pct95,
}

impl std::str::FromStr for NormMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zscore" => Ok(Self::Zscore),
            "pct95" => Ok(Self::Pct95),
            _ => Err(Error::Config(format!("unknown normalisation `{s}`"))),
        }
    }
}

/// Linear-interpolated percentile (`q` in `[0, 100]`), as numpy's default.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Degenerate channels (std or percentile below 1e-9) become all zeros.
pub fn normalize(rec: &EegRecording, mode: NormMode) -> EegRecording {
    let samples = rec
        .samples
        .iter()
        .map(|row| {
            let n = row.len().max(1) as f64;
            match mode {
                NormMode::Zscore => {
                    let mean = row.iter().sum::<f64>() / n;
                    let std = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                    if std < DEGENERATE_STD {
                        vec![0.0; row.len()]
                    } else {
                        row.iter().map(|v| (v - mean) / std).collect()
                    }
                }
                NormMode::Pct95 => {
                    let abs: Vec<f64> = row.iter().map(|v| v.abs()).collect();
                    let p = percentile(&abs, 95.0);
                    if !(p >= DEGENERATE_STD) {
                        vec![0.0; row.len()]
                    } else {
                        row.iter().map(|v| v / p).collect()
                    }
                }
            }
        })
        .collect();
    rec.with_samples(samples, rec.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Direct O(n²) DFT power at an exact frequency; independent of rustfft.
    fn dft_power(x: &[f64], rate: f64, freq: f64) -> f64 {
        let (mut re, mut im) = (0.0, 0.0);
        for (i, v) in x.iter().enumerate() {
            let ph = 2.0 * PI * freq * i as f64 / rate;
            re += v * ph.cos();
            im -= v * ph.sin();
        }
        (re * re + im * im) / (x.len() as f64).powi(2)
    }

    /// Dominant frequency by scanning the direct DFT on a 0.1 Hz grid.
    fn dominant_freq(x: &[f64], rate: f64) -> f64 {
        let mut best = (0.0, -1.0);
        let mut f = 0.5;
        while f < rate / 2.0 {
            let p = dft_power(x, rate, f);
            if p > best.1 {
                best = (f, p);
            }
            f += 0.1;
        }
        best.0
    }

    fn tone(freq: f64, amp: f64, rate: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / rate).sin()).collect()
    }

    fn rec(rows: Vec<Vec<f64>>, rate: f64) -> EegRecording {
        EegRecording::new(rate, rows, "d", "l").unwrap()
    }

    fn energy(x: &[f64]) -> f64 {
        x.iter().map(|v| v * v).sum()
    }

    #[test]
    fn bandpass_keeps_10hz() {
        let x = tone(10.0, 1.0, 400.0, 2000);
        let out = bandpass(&rec(vec![x.clone()], 400.0), 0.1, 75.0).unwrap();
        assert!((dominant_freq(&out.samples[0], 400.0) - 10.0).abs() < 0.11);
        let ratio = (dft_power(&out.samples[0], 400.0, 10.0) / dft_power(&x, 400.0, 10.0)).sqrt();
        assert!((0.9..=1.1).contains(&ratio), "{ratio}");
        assert_eq!(out.len(), 2000);
        assert_eq!(out.sample_rate, 400.0);
    }

    #[test]
    fn bandpass_removes_120hz() {
        let x = tone(120.0, 1.0, 400.0, 2000);
        let out = bandpass(&rec(vec![x.clone()], 400.0), 0.1, 75.0).unwrap();
        assert!(energy(&out.samples[0]) < 0.01 * energy(&x));
    }

    #[test]
    fn bandpass_zero_in_zero_out() {
        let out = bandpass(&rec(vec![vec![0.0; 512]], 400.0), 0.1, 75.0).unwrap();
        assert!(out.samples[0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bandpass_rejects_nyquist_violation() {
        let r = rec(vec![vec![0.0; 100]], 100.0);
        assert!(matches!(bandpass(&r, 0.1, 75.0), Err(Error::Config(_))));
        assert!(matches!(bandpass(&r, 10.0, 5.0), Err(Error::Config(_))));
    }

    #[test]
    fn detects_injected_50hz() {
        let a = tone(10.0, 1.0, 400.0, 1600);
        let b = tone(50.0, 10.0, 400.0, 1600);
        let x: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p + q).collect();
        let det = detect_line_noise(&rec(vec![x], 400.0)).unwrap();
        assert_eq!(det.frequency, Some(50.0));
        assert!(!det.limited);
    }

    #[test]
    fn detects_60hz() {
        let x = tone(60.0, 5.0, 250.0, 1000);
        let det = detect_line_noise(&rec(vec![x], 250.0)).unwrap();
        assert_eq!(det.frequency, Some(60.0));
    }

    #[test]
    fn white_noise_is_clean() {
        let mut clean = 0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = (0..4)
                .map(|_| (0..1600).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect();
            if detect_line_noise(&rec(rows, 400.0)).unwrap().frequency.is_none() {
                clean += 1;
            }
        }
        assert!(clean >= 19, "{clean}/20");
    }

    #[test]
    fn low_rate_takes_limited_path() {
        let det = detect_line_noise(&rec(vec![tone(10.0, 1.0, 100.0, 400)], 100.0)).unwrap();
        assert!(det.limited);
        assert_eq!(det.frequency, None);
    }

    #[test]
    fn short_recording_rejected() {
        assert!(detect_line_noise(&rec(vec![vec![0.0; 100]], 100.0)).is_err());
    }

    #[test]
    fn notch_removes_50hz_only() {
        let x50 = tone(50.0, 1.0, 400.0, 2000);
        let out = notch(&rec(vec![x50.clone()], 400.0), 50.0).unwrap();
        assert!(dft_power(&out.samples[0], 400.0, 50.0) < 0.05 * dft_power(&x50, 400.0, 50.0));
        assert!(energy(&out.samples[0]) < 0.05 * energy(&x50));

        let x10 = tone(10.0, 1.0, 400.0, 2000);
        let out = notch(&rec(vec![x10.clone()], 400.0), 50.0).unwrap();
        let r = dft_power(&out.samples[0], 400.0, 10.0) / dft_power(&x10, 400.0, 10.0);
        assert!((r - 1.0).abs() < 0.1);

        let out = notch(&rec(vec![vec![0.0; 256]], 400.0), 50.0).unwrap();
        assert!(out.samples[0].iter().all(|v| *v == 0.0));
        assert!(notch(&rec(vec![vec![0.0; 256]], 100.0), 50.0).is_err());
    }

    #[test]
    fn resample_halves_length_and_keeps_tone() {
        let x = tone(10.0, 1.0, 400.0, 2000);
        let out = resample(&rec(vec![x], 400.0), 200.0).unwrap();
        assert_eq!(out.len(), 1000);
        assert!((dominant_freq(&out.samples[0], 200.0) - 10.0).abs() < 0.5);
    }

    #[test]
    fn resample_identity_and_arithmetic() {
        let r = rec(vec![tone(3.0, 1.0, 200.0, 333)], 200.0);
        assert_eq!(resample(&r, 200.0).unwrap(), r);
        let r = rec(vec![vec![0.0; 1000]], 500.0);
        assert_eq!(resample(&r, 200.0).unwrap().len(), 400);
    }

    #[test]
    fn resample_upsamples_smoothly() {
        let x = tone(5.0, 1.0, 100.0, 400);
        let out = resample(&rec(vec![x], 100.0), 200.0).unwrap();
        let want = tone(5.0, 1.0, 200.0, 800);
        let err = out.samples[0].iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn resample_twice_is_stable_in_length() {
        let r = rec(vec![tone(3.0, 1.0, 256.0, 1024)], 256.0);
        let once = resample(&r, 200.0).unwrap();
        let twice = resample(&once, 200.0).unwrap();
        assert_eq!(once.len(), twice.len());
    }

    #[test]
    fn zscore_definition() {
        let out = normalize(&rec(vec![vec![1.0, 2.0, 3.0]], 1.0), NormMode::Zscore);
        let v = &out.samples[0];
        let mean = v.iter().sum::<f64>() / 3.0;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
        assert!(mean.abs() < 1e-12);
        assert!((std - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_channel_zscores_to_zero() {
        let out = normalize(&rec(vec![vec![4.2; 10]], 1.0), NormMode::Zscore);
        assert!(out.samples[0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn pct95_divides_by_percentile() {
        // |values| = 0..=20 step 0.2 → 101 values, 95th percentile = 19.0.
        let row: Vec<f64> = (0..=100)
            .map(|i| if i % 2 == 0 { 0.2 * i as f64 } else { -0.2 * i as f64 })
            .collect();
        // oracle: sorted absolute values, index 0.95·100 = 95 exactly
        let mut abs: Vec<f64> = row.iter().map(|v| v.abs()).collect();
        abs.sort_by(f64::total_cmp);
        let p = abs[95];
        assert!((p - 19.0).abs() < 1e-12);
        let out = normalize(&rec(vec![row.clone()], 1.0), NormMode::Pct95);
        for (a, b) in out.samples[0].iter().zip(&row) {
            assert!((a - b / p).abs() < 1e-15);
        }
    }

    #[test]
    fn pct95_value_four() {
        // 20 values where 19 are |4| and one is larger: numpy percentile gives 4 + 0.05·(8-4) = 4.2;
        // choose instead 40 values with 38 fours so the interpolation stays on 4.
        let mut row = vec![4.0; 38];
        row.extend([-4.0, 100.0]);
        let out = normalize(&rec(vec![row.clone()], 1.0), NormMode::Pct95);
        assert!((percentile(&row.iter().map(|v| v.abs()).collect::<Vec<_>>(), 95.0) - 4.0).abs() < 1e-12);
        assert_eq!(out.samples[0][0], 1.0);
        assert_eq!(out.samples[0][39], 25.0);
    }

    #[test]
    fn ops_preserve_metadata_and_channels() {
        let mut r = rec(vec![tone(10.0, 1.0, 400.0, 800), tone(12.0, 1.0, 400.0, 800)], 400.0);
        r.subject_id = Some("s".into());
        for out in [
            bandpass(&r, 0.1, 75.0).unwrap(),
            notch(&r, 50.0).unwrap(),
            resample(&r, 200.0).unwrap(),
            normalize(&r, NormMode::Zscore),
        ] {
            assert_eq!(out.channels(), 2);
            assert_eq!(out.label, r.label);
            assert_eq!(out.dataset_id, r.dataset_id);
            assert_eq!(out.subject_id, r.subject_id);
        }
    }
}
