//! EEG ingestion, preprocessing, patching, split planning and synthetic data.

mod filters;
mod recording;
mod splits;
mod synth;

pub use filters::{
    bandpass, bandpass_gain, detect_line_noise, mean_magnitude_spectrum, normalize, notch, notch_gain, percentile, resample, LineNoise,
    NormMode, LINE_NOISE_RATIO, TRANSITION_HZ,
};
pub use recording::{import_csv, CsvSidecar, EegRecording};
pub use splits::{plan_splits, SplitPlan, SplitStrategy, Splits};
pub use synth::{band_power_features, synth_task, BandPowerClassifier, SynthFamily, SynthSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Non-overlapping windows of one recording, `C × T × t`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub channels: usize,
    pub times: usize,
    pub patch_len: usize,
    pub data: Vec<f64>,
}

impl PatchGrid {
    pub fn patch(&self, c: usize, tau: usize) -> &[f64] {
        let start = (c * self.times + tau) * self.patch_len;
        &self.data[start..start + self.patch_len]
    }
}

/// Splits every channel into `T = ⌊S/t⌋` windows of length `t`; the
/// remainder is discarded.
pub fn patch(rec: &EegRecording, t: usize) -> Result<PatchGrid> {
    if t == 0 {
        return Err(Error::Config("patch length must be at least 1".into()));
    }
    let s = rec.len();
    if s < t {
        return Err(Error::EmptySample(format!("{s} samples cannot fill one patch of {t}")));
    }
    let times = s / t;
    let mut data = Vec::with_capacity(rec.channels() * times * t);
    for row in &rec.samples {
        data.extend_from_slice(&row[..times * t]);
    }
    Ok(PatchGrid {
        channels: rec.channels(),
        times,
        patch_len: t,
        data,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LineFreq {
    Auto,
    #[serde(rename = "50")]
    Hz50,
    #[serde(rename = "60")]
    Hz60,
    Off,
}

impl std::str::FromStr for LineFreq {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Self::Auto),
            "50" => Ok(Self::Hz50),
            "60" => Ok(Self::Hz60),
            "off" => Ok(Self::Off),
            _ => Err(Error::Config(format!("line frequency must be auto|50|60|off, got `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub band_low: f64,
    pub band_high: f64,
    pub line_freq: LineFreq,
    pub target_rate: f64,
    pub norm: NormMode,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        Self {
            band_low: 0.1,
            band_high: 75.0,
            line_freq: LineFreq::Auto,
            target_rate: 200.0,
            norm: NormMode::Zscore,
        }
    }
}

impl PreprocessSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.band_low && self.band_low < self.band_high && self.band_high < self.target_rate / 2.0) {
            return Err(Error::Config(format!(
                "need 0 < low < high < target/2; got [{}, {}] with target {} Hz",
                self.band_low, self.band_high, self.target_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    /// Frequency removed by the notch stage, if any.
    pub notch_hz: Option<f64>,
    pub detection: Option<LineNoise>,
    /// Upper band edge actually applied (clamped below the input Nyquist).
    pub band_high_applied: f64,
}

/// Band-pass, notch (detected or forced), resample, normalise, in that order.
pub fn preprocess(rec: &EegRecording, spec: &PreprocessSpec) -> Result<(EegRecording, PreprocessReport)> {
    spec.validate()?;
    rec.validate()?;
    let detection = match spec.line_freq {
        LineFreq::Auto => Some(detect_line_noise(rec)?),
        _ => None,
    };
    let nyquist = rec.sample_rate / 2.0;
    let high = spec.band_high.min(nyquist - TRANSITION_HZ);
    if high < spec.band_high {
        log::warn!(
            "input rate {} Hz: band-pass upper edge lowered from {} to {high} Hz",
            rec.sample_rate,
            spec.band_high
        );
    }
    let mut out = bandpass(rec, spec.band_low, high)?;
    let notch_hz = match spec.line_freq {
        LineFreq::Auto => detection.and_then(|d| d.frequency),
        LineFreq::Hz50 => Some(50.0),
        LineFreq::Hz60 => Some(60.0),
        LineFreq::Off => None,
    };
    if let Some(f) = notch_hz {
        if f < nyquist {
            out = notch(&out, f)?;
        }
    }
    out = resample(&out, spec.target_rate)?;
    out = normalize(&out, spec.norm);
    Ok((
        out,
        PreprocessReport {
            notch_hz,
            detection,
            band_high_applied: high,
        },
    ))
}

/// [`preprocess`] followed by [`patch`].
pub fn preprocess_to_patches(rec: &EegRecording, spec: &PreprocessSpec, patch_len: usize) -> Result<PatchGrid> {
    let (clean, _) = preprocess(rec, spec)?;
    patch(&clean, patch_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn ramp(c: usize, s: usize) -> EegRecording {
        let rows = (0..c).map(|ch| (0..s).map(|i| (ch * 10_000 + i) as f64).collect()).collect();
        EegRecording::new(200.0, rows, "d", "l").unwrap()
    }

    #[test]
    fn patch_counts() {
        assert_eq!(patch(&ramp(2, 1000), 200).unwrap().times, 5);
        let g = patch(&ramp(2, 1050), 200).unwrap();
        assert_eq!(g.times, 5);
        assert_eq!(g.data.len(), 2 * 5 * 200);
        assert_eq!(g.patch(1, 4)[199], (10_000 + 999) as f64);
    }

    #[test]
    fn patch_too_short() {
        assert!(matches!(patch(&ramp(1, 10), 20), Err(Error::EmptySample(_))));
        assert!(patch(&ramp(1, 10), 0).is_err());
    }

    proptest! {
        #[test]
        fn patches_partition_prefix(c in 1usize..4, s in 1usize..300, t in 1usize..50) {
            let rec = ramp(c, s);
            match patch(&rec, t) {
                Ok(g) => {
                    prop_assert_eq!(g.times, s / t);
                    for ch in 0..c {
                        let rebuilt: Vec<f64> = (0..g.times).flat_map(|tau| g.patch(ch, tau).to_vec()).collect();
                        prop_assert_eq!(&rebuilt[..], &rec.samples[ch][..g.times * t]);
                    }
                }
                Err(_) => prop_assert!(s < t),
            }
        }
    }

    #[test]
    fn spec_validation() {
        assert!(PreprocessSpec::default().validate().is_ok());
        let bad = PreprocessSpec {
            band_high: 120.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn pipeline_removes_line_noise_and_keeps_tone() {
        let rate = 500.0;
        let n = 2500;
        let row: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / rate;
                (2.0 * PI * 10.0 * t).sin() + 10.0 * (2.0 * PI * 50.0 * t).sin()
            })
            .collect();
        let rec = EegRecording::new(rate, vec![row.clone(), row], "d", "l").unwrap();
        let (out, report) = preprocess(&rec, &PreprocessSpec::default()).unwrap();
        assert_eq!(report.notch_hz, Some(50.0));
        assert_eq!(out.len(), 1000);
        assert_eq!(out.sample_rate, 200.0);
        let x = &out.samples[0];
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        assert!(mean.abs() < 1e-9);
    }

    #[test]
    fn preprocess_to_patches_shape() {
        let rec = ramp(3, 800);
        let spec = PreprocessSpec {
            line_freq: LineFreq::Off,
            ..Default::default()
        };
        let g = preprocess_to_patches(&rec, &spec, 100).unwrap();
        assert_eq!((g.channels, g.times, g.patch_len), (3, 8, 100));
    }

    #[test]
    fn line_freq_parse() {
        assert_eq!("auto".parse::<LineFreq>().unwrap(), LineFreq::Auto);
        assert_eq!("60".parse::<LineFreq>().unwrap(), LineFreq::Hz60);
        assert!("55".parse::<LineFreq>().is_err());
    }
}
