//! Binary checkpoint container.
//!
//! Layout: `"DFCK"` | u32 LE version | u64 LE header length | UTF-8 JSON
//! header | raw little-endian f32 payloads. The header maps each tensor
//! name to `{dtype, shape, offset, nbytes}` (offsets relative to the start
//! of the payload section) and also holds the reserved keys `config`,
//! `step` and `rng`. Keys are sorted, so equal checkpoints serialise to
//! equal bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DFCK";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 16;
const RESERVED: [&str; 3] = ["config", "step", "rng"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Free-form configuration snapshot.
    pub config: Value,
    pub step: u64,
    pub rng: Option<RngState>,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

fn fmt_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        detail: detail.into(),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = Map::new();
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            if RESERVED.contains(&name.as_str()) {
                return Err(Error::Contract(format!("tensor name `{name}` is reserved")));
            }
            let nbytes = 4 * t.numel() as u64;
            let rec = TensorRecord {
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset,
                nbytes,
            };
            header.insert(name.clone(), serde_json::to_value(rec)?);
            offset += nbytes;
        }
        header.insert("config".into(), self.config.clone());
        header.insert("step".into(), Value::from(self.step));
        header.insert("rng".into(), serde_json::to_value(&self.rng)?);
        let json = serde_json::to_vec(&Value::Object(header))?;
        let mut out = Vec::with_capacity(PREAMBLE + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses and validates the whole file before returning anything.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE {
            return Err(fmt_err(bytes.len(), "file shorter than the fixed preamble"));
        }
        if &bytes[..4] != MAGIC {
            return Err(fmt_err(0, "bad magic, expected DFCK"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(fmt_err(4, format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let payload_start = (PREAMBLE as u64)
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| fmt_err(8, format!("header length {hlen} exceeds file size")))?
            as usize;
        let header: Map<String, Value> = serde_json::from_slice(&bytes[PREAMBLE..payload_start])
            .map_err(|e| fmt_err(PREAMBLE + e.column().saturating_sub(1), format!("header JSON: {e}")))?;
        let payload = &bytes[payload_start..];
        let mut config = Value::Null;
        let mut step = None;
        let mut rng = None;
        let mut tensors = BTreeMap::new();
        let mut expected_end = 0u64;
        for (name, v) in header {
            match name.as_str() {
                "config" => config = v,
                "step" => {
                    step = Some(v.as_u64().ok_or_else(|| fmt_err(PREAMBLE, "`step` is not an integer"))?)
                }
                "rng" => {
                    rng = serde_json::from_value(v)
                        .map_err(|e| fmt_err(PREAMBLE, format!("`rng`: {e}")))?
                }
                _ => {
                    let rec: TensorRecord = serde_json::from_value(v)
                        .map_err(|e| fmt_err(PREAMBLE, format!("tensor `{name}`: {e}")))?;
                    if rec.dtype != "f32" {
                        return Err(fmt_err(PREAMBLE, format!("tensor `{name}` has dtype {}", rec.dtype)));
                    }
                    let n: usize = rec.shape.iter().product();
                    if rec.nbytes != 4 * n as u64 {
                        return Err(fmt_err(PREAMBLE, format!("tensor `{name}`: nbytes does not match shape")));
                    }
                    let end = rec.offset.checked_add(rec.nbytes).filter(|&e| e <= payload.len() as u64);
                    let Some(end) = end else {
                        return Err(fmt_err(
                            payload_start + rec.offset as usize,
                            format!("tensor `{name}` runs past end of file"),
                        ));
                    };
                    let raw = &payload[rec.offset as usize..end as usize];
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    expected_end = expected_end.max(end);
                    tensors.insert(name, Tensor::new(rec.shape, data)?);
                }
            }
        }
        let step = step.ok_or_else(|| fmt_err(PREAMBLE, "header lacks `step`"))?;
        if expected_end != payload.len() as u64 {
            return Err(fmt_err(
                payload_start + expected_end as usize,
                "trailing bytes after the last tensor",
            ));
        }
        Ok(Self {
            config,
            step,
            rng,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
