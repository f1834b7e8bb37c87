use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelSpec};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "quakecast-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAGIC: &[u8; 4] = b"QCKP";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointTensor {
    pub name: String,
    pub shape: Vec<usize>,
    /// Row-major.
    pub values: Vec<f64>,
}

/// Every named tensor of a model (trainable or not) plus the spec it was
/// built from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub spec: ModelSpec,
    pub tensors: Vec<CheckpointTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            spec: model.spec().clone(),
            tensors: model
                .params()
                .iter()
                .map(|p| CheckpointTensor {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    values: p.value.data().to_vec(),
                })
                .collect(),
        }
    }

    pub(crate) fn check_header(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Version(format!(
                "unsupported checkpoint {} v{} (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})",
                self.format, self.version
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        ck.check_header()?;
        Ok(ck)
    }

    /// Little-endian layout: magic, version, spec JSON, then each tensor as
    /// name, rank, dims and values.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        let spec = serde_json::to_vec(&self.spec)?;
        put_len(&mut out, spec.len());
        out.extend_from_slice(&spec);
        put_len(&mut out, self.tensors.len());
        for t in &self.tensors {
            put_len(&mut out, t.name.len());
            out.extend_from_slice(t.name.as_bytes());
            put_len(&mut out, t.shape.len());
            for &d in &t.shape {
                put_len(&mut out, d);
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Version("not a binary checkpoint".into()));
        }
        let mut word = [0u8; 4];
        read_exact(&mut r, &mut word)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version(format!("unsupported checkpoint version {version}")));
        }
        let spec_len = get_len(&mut r)?;
        let spec: ModelSpec = serde_json::from_slice(take(&mut r, spec_len)?)?;
        let count = get_len(&mut r)?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = get_len(&mut r)?;
            let name = String::from_utf8(take(&mut r, name_len)?.to_vec())
                .map_err(|_| Error::Version("tensor name is not UTF-8".into()))?;
            let rank = get_len(&mut r)?;
            let shape = (0..rank).map(|_| get_len(&mut r)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.len()))
                .ok_or_else(truncated)?;
            let values = take(&mut r, n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push(CheckpointTensor { name, shape, values });
        }
        if !r.is_empty() {
            return Err(Error::Version("trailing bytes after checkpoint".into()));
        }
        Ok(Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version,
            spec,
            tensors,
        })
    }

    /// Writes binary when the extension is `.bin`, JSON otherwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = if is_binary(path) {
            self.to_bytes()?
        } else {
            self.to_json()?.into_bytes()
        };
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.starts_with(MAGIC) {
            Self::from_bytes(&bytes)
        } else {
            let text = String::from_utf8(bytes).map_err(|_| Error::Version("checkpoint is neither binary nor JSON".into()))?;
            Self::from_json(&text)
        }
    }
}

fn is_binary(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "bin")
}

fn truncated() -> Error {
    Error::Version("truncated checkpoint".into())
}

fn put_len(out: &mut Vec<u8>, n: usize) {
    out.extend_from_slice(&(n as u64).to_le_bytes());
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| truncated())
}

fn get_len(r: &mut &[u8]) -> Result<usize> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    usize::try_from(u64::from_le_bytes(b)).map_err(|_| truncated())
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(truncated());
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}
