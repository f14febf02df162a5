//! Binary checkpoint container: `NQCK` magic, u32 version, u64 header
//! length, JSON header, then little-endian f64 payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{Moments, OptimizerState};
use crate::tensor::Module;

pub const MAGIC: &[u8; 4] = b"NQCK";
pub const VERSION: u32 = 1;

/// Location of one named tensor inside the payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub params: Vec<TensorEntry>,
    /// Optimizer config and step; moments live in the payload as `m:NAME`
    /// and `v:NAME` entries.
    pub optimizer: Option<OptimizerMeta>,
    pub moments: Vec<TensorEntry>,
    /// Caller-defined state (run config, scheduler, RNG position).
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub config: crate::optim::AdamWConfig,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub payload: Vec<f64>,
}

impl Checkpoint {
    /// Captures every parameter of `model` plus optional optimizer state.
    pub fn capture<M: Module + ?Sized>(model: &M, optimizer: Option<&OptimizerState>, extra: serde_json::Value) -> Self {
        let mut payload = Vec::new();
        let mut params = Vec::new();
        model.visit_params(&mut |p| {
            params.push(TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                offset: payload.len(),
            });
            payload.extend_from_slice(p.value.data());
        });
        let mut moments = Vec::new();
        if let Some(opt) = optimizer {
            for (name, mo) in &opt.moments {
                for (tag, v) in [("m", &mo.m), ("v", &mo.v)] {
                    moments.push(TensorEntry {
                        name: format!("{tag}:{name}"),
                        shape: vec![v.len()],
                        offset: payload.len(),
                    });
                    payload.extend_from_slice(v);
                }
            }
        }
        Self {
            header: Header {
                version: VERSION,
                params,
                optimizer: optimizer.map(|o| OptimizerMeta {
                    config: o.config.clone(),
                    step: o.step,
                }),
                moments,
                extra,
            },
            payload,
        }
    }

    fn slice(&self, e: &TensorEntry) -> Result<&[f64]> {
        self.payload
            .get(e.offset..e.offset + e.len())
            .ok_or_else(|| Error::Checkpoint(format!("entry `{}` runs past the payload", e.name)))
    }

    /// Overwrites `model`'s parameters. Any name or shape difference is
    /// refused with a summary and leaves the model untouched.
    pub fn restore_params<M: Module + ?Sized>(&self, model: &mut M) -> Result<()> {
        let stored: BTreeMap<&str, &TensorEntry> = self.header.params.iter().map(|e| (e.name.as_str(), e)).collect();
        let mut diffs = Vec::new();
        let mut seen = Vec::new();
        model.visit_params(&mut |p| {
            seen.push(p.name.clone());
            match stored.get(p.name.as_str()) {
                None => diffs.push(format!("missing `{}`", p.name)),
                Some(e) if e.shape != p.value.shape() => {
                    diffs.push(format!("`{}`: stored {:?}, model {:?}", p.name, e.shape, p.value.shape()))
                }
                Some(_) => {}
            }
        });
        for name in stored.keys() {
            if !seen.iter().any(|s| s == name) {
                diffs.push(format!("unexpected `{name}`"));
            }
        }
        if !diffs.is_empty() {
            return Err(Error::Checkpoint(format!("parameter mismatch: {}", diffs.join("; "))));
        }
        for e in &self.header.params {
            self.slice(e)?;
        }
        model.visit_params_mut(&mut |p| {
            let e = stored[p.name.as_str()];
            let src = &self.payload[e.offset..e.offset + e.len()];
            p.value.data_mut().copy_from_slice(src);
        });
        Ok(())
    }

    pub fn optimizer(&self) -> Result<Option<OptimizerState>> {
        let Some(meta) = &self.header.optimizer else { return Ok(None) };
        let mut moments: BTreeMap<String, Moments> = BTreeMap::new();
        for e in &self.header.moments {
            let (tag, name) = e
                .name
                .split_once(':')
                .ok_or_else(|| Error::Checkpoint(format!("bad moment entry `{}`", e.name)))?;
            let data = self.slice(e)?.to_vec();
            let slot = moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: Vec::new(),
                v: Vec::new(),
            });
            match tag {
                "m" => slot.m = data,
                "v" => slot.v = data,
                _ => return Err(Error::Checkpoint(format!("bad moment entry `{}`", e.name))),
            }
        }
        Ok(Some(OptimizerState {
            config: meta.config.clone(),
            step: meta.step,
            moments,
        }))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("version {version}, expected {VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() < hlen {
            return Err(Error::Checkpoint(format!("truncated header: {} of {hlen} bytes", body.len())));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let rest = &body[hlen..];
        if !rest.len().is_multiple_of(8) {
            return Err(Error::Checkpoint(format!(
                "payload of {} bytes is not whole f64 values",
                rest.len()
            )));
        }
        let payload: Vec<f64> = rest
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let need = header
            .params
            .iter()
            .chain(&header.moments)
            .map(|e| e.offset + e.len())
            .max()
            .unwrap_or(0);
        if payload.len() < need {
            return Err(Error::Checkpoint(format!("truncated payload: {} of {need} values", payload.len())));
        }
        Ok(Self { header, payload })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::AdamWConfig;
    use crate::tensor::{Param, Tensor};

    struct Pair(Param, Param);
    impl Module for Pair {
        fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
            f(&self.0);
            f(&self.1);
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
            f(&mut self.0);
            f(&mut self.1);
        }
    }

    fn pair(a: f64) -> Pair {
        Pair(Param::new("a", Tensor::full(&[2, 3], a)), Param::new("b", Tensor::full(&[4], -a)))
    }

    #[test]
    fn round_trip_bytes_and_optimizer() {
        let m = pair(0.25);
        let mut opt = OptimizerState::new(AdamWConfig::new(1e-3, 0.01, 0.0, 10).unwrap());
        opt.step = 3;
        opt.moments.insert(
            "a".into(),
            Moments {
                m: vec![1.0; 6],
                v: vec![2.0; 6],
            },
        );
        let ck = Checkpoint::capture(&m, Some(&opt), serde_json::json!({"k": 1}));
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.optimizer().unwrap().unwrap(), opt);
        let mut other = pair(9.0);
        back.restore_params(&mut other).unwrap();
        assert_eq!(other.fingerprint(), m.fingerprint());
    }

    #[test]
    fn truncated_and_mismatched_files_are_refused() {
        let ck = Checkpoint::capture(&pair(1.0), None, serde_json::Value::Null);
        let bytes = ck.to_bytes().unwrap();
        for cut in [3, 10, 20, bytes.len() - 8, bytes.len() - 3] {
            assert!(
                matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_) | Error::Json(_))),
                "{cut}"
            );
        }
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("version"));

        let mut other = Pair(Param::new("a", Tensor::zeros(&[3, 2])), Param::new("c", Tensor::zeros(&[4])));
        let err = ck.restore_params(&mut other).unwrap_err().to_string();
        assert!(
            err.contains("`a`") && err.contains("missing `c`") && err.contains("unexpected `b`"),
            "{err}"
        );
        assert_eq!(other.0.value.data(), &[0.0; 6]);
    }
}
