//! Recording type plus the `.eegb` container and CSV import.
//!
//! `.eegb` layout, all little-endian:
//!
//! | field        | encoding                          |
//! |--------------|-----------------------------------|
//! | channels C   | `u32`                             |
//! | samples S    | `u32`                             |
//! | rate (Hz)    | `f64`                             |
//! | label        | `u32` byte length + UTF-8         |
//! | dataset id   | `u32` byte length + UTF-8         |
//! | subject id   | `u32` byte length + UTF-8 (0 = none) |
//! | payload      | `C·S` × `f32`, row-major by channel |

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One multichannel EEG sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EegRecording {
    pub sample_rate: f64,
    /// `C` rows of `S` samples each.
    pub samples: Vec<Vec<f64>>,
    pub dataset_id: String,
    pub label: String,
    pub subject_id: Option<String>,
    #[serde(default)]
    pub session_id: Option<String>,
    #[serde(default)]
    pub trial: Option<u32>,
}

impl EegRecording {
    pub fn new(sample_rate: f64, samples: Vec<Vec<f64>>, dataset_id: impl Into<String>, label: impl Into<String>) -> Result<Self> {
        let rec = Self {
            sample_rate,
            samples,
            dataset_id: dataset_id.into(),
            label: label.into(),
            subject_id: None,
            session_id: None,
            trial: None,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn with_subject(mut self, subject: impl Into<String>) -> Self {
        self.subject_id = Some(subject.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 0.0) || !self.sample_rate.is_finite() {
            return Err(Error::Config(format!("sample rate must be positive, got {}", self.sample_rate)));
        }
        if self.samples.is_empty() {
            return Err(Error::EmptySample("recording has no channels".into()));
        }
        let s = self.samples[0].len();
        if self.samples.iter().any(|r| r.len() != s) {
            return Err(Error::Shape("channels have unequal lengths".into()));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.samples.len()
    }

    /// Number of temporal samples `S`.
    pub fn len(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn duration_secs(&self) -> f64 {
        self.len() as f64 / self.sample_rate
    }

    /// Same metadata, new signal.
    pub(crate) fn with_samples(&self, samples: Vec<Vec<f64>>, sample_rate: f64) -> Self {
        Self {
            sample_rate,
            samples,
            dataset_id: self.dataset_id.clone(),
            label: self.label.clone(),
            subject_id: self.subject_id.clone(),
            session_id: self.session_id.clone(),
            trial: self.trial,
        }
    }

    pub fn to_eegb_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 4 * self.channels() * self.len());
        out.extend((self.channels() as u32).to_le_bytes());
        out.extend((self.len() as u32).to_le_bytes());
        out.extend(self.sample_rate.to_le_bytes());
        for s in [
            self.label.as_str(),
            self.dataset_id.as_str(),
            self.subject_id.as_deref().unwrap_or(""),
        ] {
            out.extend((s.len() as u32).to_le_bytes());
            out.extend(s.as_bytes());
        }
        for row in &self.samples {
            for v in row {
                out.extend((*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_eegb_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { buf: bytes, pos: 0 };
        let c = r.u32()? as usize;
        let s = r.u32()? as usize;
        let rate = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let label = r.string()?;
        let dataset_id = r.string()?;
        let subject = r.string()?;
        let payload = r.take(c * s * 4)?;
        if r.pos != bytes.len() {
            return Err(Error::Shape(format!("{} trailing bytes after payload", bytes.len() - r.pos)));
        }
        let samples = payload
            .chunks_exact(4 * s.max(1))
            .take(c)
            .map(|row| {
                row.chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                    .collect()
            })
            .collect::<Vec<Vec<f64>>>();
        let samples = if s == 0 { vec![Vec::new(); c] } else { samples };
        let mut rec = Self::new(rate, samples, dataset_id, label)?;
        if !subject.is_empty() {
            rec.subject_id = Some(subject);
        }
        Ok(rec)
    }

    pub fn write_eegb(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_eegb_bytes())?;
        Ok(())
    }

    pub fn read_eegb(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_eegb_bytes(&bytes).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })
    }
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Shape(format!(
                "truncated container: need {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Shape(e.to_string()))
    }
}

/// Sidecar metadata for CSV imports (`<stem>.json` next to `<stem>.csv`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvSidecar {
    pub rate: f64,
    pub label: String,
    pub dataset_id: String,
    #[serde(default)]
    pub subject_id: Option<String>,
}

/// Reads `<stem>.csv` (first column channel index, remaining columns samples)
/// and its JSON sidecar. Rows may appear in any channel order; a non-numeric
/// first line is treated as a header and skipped.
pub fn import_csv(csv_path: &Path) -> Result<EegRecording> {
    let sidecar_path = csv_path.with_extension("json");
    let meta: CsvSidecar = serde_json::from_slice(&fs::read(&sidecar_path)?)?;
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_path(csv_path)?;
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = i + 1;
        let parse_err = |message: String| Error::Parse {
            path: csv_path.to_path_buf(),
            line,
            message,
        };
        let first = rec.get(0).unwrap_or("").trim();
        let Ok(ch) = first.parse::<usize>() else {
            if i == 0 {
                continue;
            }
            return Err(parse_err(format!("bad channel index `{first}`")));
        };
        let vals = rec
            .iter()
            .skip(1)
            .map(|f| f.trim().parse::<f64>().map_err(|e| parse_err(format!("`{f}`: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        rows.push((ch, vals));
    }
    rows.sort_by_key(|(ch, _)| *ch);
    for (expect, (ch, _)) in rows.iter().enumerate() {
        if *ch != expect {
            return Err(Error::Parse {
                path: csv_path.to_path_buf(),
                line: 0,
                message: format!("channel indices must be 0..C without gaps; found {ch} at position {expect}"),
            });
        }
    }
    let samples = rows.into_iter().map(|(_, v)| v).collect();
    let mut rec = EegRecording::new(meta.rate, samples, meta.dataset_id, meta.label)?;
    rec.subject_id = meta.subject_id;
    Ok(rec)
}
