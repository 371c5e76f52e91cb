//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//! `b"CFGR"`, `u32` version, `u64` metadata length, metadata (TOML text),
//! `u32` record count, then per record: `u32` name length, name bytes,
//! `u8` dtype tag, `u32` rank, `u64` per dim, raw values.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::networks::ParamStore;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"CFGR";
pub const VERSION: u32 = 1;

/// Human-readable part of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// `coarse` or `fine`.
    pub stage: String,
    /// Completed iterations of `stage`.
    pub iteration: u64,
    /// Adam step counters keyed by optimizer name.
    #[serde(default)]
    pub adam_steps: BTreeMap<String, u64>,
    /// Free-form annotations, e.g. parameter checksums.
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn as_f32(&self) -> Option<&Tensor<f32>> {
        match self {
            AnyTensor::F32(t) => Some(t),
            AnyTensor::F64(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, AnyTensor)>,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta) -> Self {
        Checkpoint { meta, tensors: Vec::new() }
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), AnyTensor::F32(t)));
    }

    /// Adds every tensor of `store` as `prefix/name`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for (name, t) in store.iter() {
            self.push(format!("{prefix}/{name}"), t.clone());
        }
    }

    pub fn push_tensors(&mut self, prefix: &str, tensors: &[Tensor<f32>]) {
        for (i, t) in tensors.iter().enumerate() {
            self.push(format!("{prefix}/{i}"), t.clone());
        }
    }

    /// Overwrites `store` from `prefix/name` records; shapes must agree.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
        let names: Vec<String> = store.names().to_vec();
        for name in names {
            let key = format!("{prefix}/{name}");
            let src = self
                .get(&key)
                .and_then(AnyTensor::as_f32)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks f32 tensor `{key}`")))?;
            let dst = store.get_mut(&name).expect("name taken from store");
            if dst.shape() != src.shape() {
                return Err(Error::Data(format!(
                    "checkpoint tensor `{key}` has shape {:?}, model expects {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    /// Reads `prefix/0..count`.
    pub fn tensors_with_prefix(&self, prefix: &str, count: usize) -> Result<Vec<Tensor<f32>>> {
        (0..count)
            .map(|i| {
                let key = format!("{prefix}/{i}");
                self.get(&key)
                    .and_then(AnyTensor::as_f32)
                    .cloned()
                    .ok_or_else(|| Error::Data(format!("checkpoint lacks f32 tensor `{key}`")))
            })
            .collect()
    }
}

fn encode_values<T: Real>(t: &Tensor<T>, out: &mut Vec<u8>) {
    for v in t.data() {
        (*v).write_le(out);
    }
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let meta = toml::to_string(&ckpt.meta).map_err(|e| Error::Data(format!("checkpoint metadata: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let tag = match t {
            AnyTensor::F32(_) => f32::DTYPE,
            AnyTensor::F64(_) => f64::DTYPE,
        };
        out.push(tag);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match t {
            AnyTensor::F32(t) => encode_values(t, &mut out),
            AnyTensor::F64(t) => encode_values(t, &mut out),
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &dyn Fn() -> String) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Data(what()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &dyn Fn() -> String) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &dyn Fn() -> String) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn decode_values<T: Real>(bytes: &[u8], shape: &[usize]) -> Result<Tensor<T>> {
    let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::new(shape, data)
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { buf, pos: 0 };
    let header = || "corrupt checkpoint header".to_string();
    if c.take(4, &header)? != MAGIC {
        return Err(Error::Data("corrupt checkpoint header: bad magic".into()));
    }
    let version = c.u32(&header)?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "unknown checkpoint version {version} (this build reads version {VERSION})"
        )));
    }
    let meta_len = c.u64(&header)? as usize;
    let meta_bytes = c.take(meta_len, &|| "corrupt checkpoint header: metadata truncated".into())?;
    let meta_text = std::str::from_utf8(meta_bytes).map_err(|_| Error::Data("checkpoint metadata is not UTF-8".into()))?;
    let meta: CheckpointMeta =
        toml::from_str(meta_text).map_err(|e| Error::Data(format!("checkpoint metadata: {e}")))?;
    let count = c.u32(&header)? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for i in 0..count {
        let rec = |what: &str| format!("truncated tensor block: record {i} {what}");
        let name_len = c.u32(&|| rec("name length"))? as usize;
        let name = String::from_utf8(c.take(name_len, &|| rec("name"))?.to_vec())
            .map_err(|_| Error::Data(rec("name is not UTF-8")))?;
        let incomplete = || format!("truncated tensor block: tensor `{name}` is incomplete");
        let tag = c.take(1, &incomplete)?[0];
        let rank = c.u32(&incomplete)? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(c.u64(&incomplete)? as usize);
        }
        let count: usize = shape.iter().product();
        let t = match tag {
            t if t == f32::DTYPE => AnyTensor::F32(decode_values(c.take(count * 4, &incomplete)?, &shape)?),
            t if t == f64::DTYPE => AnyTensor::F64(decode_values(c.take(count * 8, &incomplete)?, &shape)?),
            other => return Err(Error::Data(format!("tensor `{name}` has unknown dtype tag {other}"))),
        };
        tensors.push((name, t));
    }
    if c.pos != buf.len() {
        return Err(Error::Data(format!("{} trailing bytes after the last tensor", buf.len() - c.pos)));
    }
    Ok(Checkpoint { meta, tensors })
}

/// Writes through a temporary sibling so a crash never leaves a torn file.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode(ckpt)?;
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode(&buf).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(CheckpointMeta {
            stage: "coarse".into(),
            iteration: 7,
            adam_steps: BTreeMap::from([("coarse".to_string(), 7)]),
            notes: BTreeMap::new(),
            config: RunConfig::smoke(),
        });
        c.push("enc/w", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.1 - 0.25));
        c.push("nan", Tensor::from_fn(&[2], |_| f32::NAN));
        c.tensors.push(("x64".into(), AnyTensor::F64(Tensor::from_fn(&[1, 2, 2], |i| (i as f64).sqrt()))));
        c
    }

    fn bits(c: &Checkpoint) -> Vec<(String, Vec<u64>)> {
        c.tensors
            .iter()
            .map(|(n, t)| {
                let b = match t {
                    AnyTensor::F32(t) => t.data().iter().map(|v| v.to_bits() as u64).collect(),
                    AnyTensor::F64(t) => t.data().iter().map(|v| v.to_bits()).collect(),
                };
                (n.clone(), b)
            })
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        let c = sample();
        save_checkpoint(&p, &c).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back.meta, c.meta);
        assert_eq!(bits(&back), bits(&c));
    }

    #[test]
    fn truncation_names_the_tensor() {
        let bytes = encode(&sample()).unwrap();
        let err = decode(&bytes[..bytes.len() - 3]).unwrap_err().to_string();
        assert!(err.contains("`x64`") && err.contains("truncated"), "{err}");
    }

    #[test]
    fn header_and_version_errors() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[4] = 9;
        assert!(decode(&bytes).unwrap_err().to_string().contains("unknown checkpoint version 9"));
        bytes[0] = b'X';
        assert!(decode(&bytes).unwrap_err().to_string().contains("corrupt checkpoint header"));
        assert!(decode(b"CF").unwrap_err().to_string().contains("corrupt checkpoint header"));
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_checkpoint(Path::new("/nonexistent/model.ckpt")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/model.ckpt"));
    }
}
