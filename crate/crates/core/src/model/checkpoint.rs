use std::collections::BTreeMap;
use std::path::Path;

use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{ModelError, ModelSpec, Result};
use crate::tensor::Tensor;

pub const CKPT_VERSION: &str = "ckpt-v1";
const DTYPE: &str = "f64";

/// Named tensors plus the spec and free-form metadata.
///
/// Serialized layout, all integers little-endian:
///
/// ```text
/// "ckpt-v1\n"
/// u64 header length, header JSON {"format_version", "metadata", "spec"}
/// u64 tensor count
/// per tensor in sorted-name order:
///   u32 name length, name bytes
///   u8 dtype length, dtype bytes ("f64")
///   u32 rank, u64 per dimension
///   raw little-endian f64 values
/// ```
///
/// JSON object keys are sorted, so loading and re-saving reproduces the
/// same bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    spec: ModelSpec,
    tensors: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, Value>,
}

pub(crate) fn valid_name(name: &str) -> bool {
    if name.starts_with("embed.") || name.starts_with("adapter.") {
        return true;
    }
    let Some(rest) = name.strip_prefix("block.") else {
        return false;
    };
    let mut parts = rest.splitn(2, '.');
    let idx = parts.next().unwrap_or("");
    let tail = parts.next().unwrap_or("");
    !idx.is_empty() && idx.bytes().all(|b| b.is_ascii_digit()) && !tail.is_empty()
}

impl Checkpoint {
    pub fn new(spec: ModelSpec, tensors: BTreeMap<String, Tensor>) -> Self {
        Self {
            spec,
            tensors,
            metadata: BTreeMap::new(),
        }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> BTreeMap<String, Tensor> {
        self.tensors
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn metadata(&self) -> &BTreeMap<String, Value> {
        &self.metadata
    }

    pub fn set_meta(&mut self, key: &str, value: Value) {
        self.metadata.insert(key.to_string(), value);
    }

    pub fn meta(&self, key: &str) -> Option<&Value> {
        self.metadata.get(key)
    }

    /// Tensors outside the `adapter.*` namespace.
    pub fn base_tensors(&self) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter(|(k, _)| !k.starts_with("adapter."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Only the `adapter.*` tensors, with the same spec and metadata.
    pub fn adapter_bundle(&self) -> Checkpoint {
        Checkpoint {
            spec: self.spec,
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with("adapter."))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            metadata: self.metadata.clone(),
        }
    }

    /// SHA-256 over the names, shapes and raw bytes of the selected tensors.
    pub fn checksum(&self, filter: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.tensors.iter().filter(|(k, _)| filter(k)) {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn header_json(&self) -> String {
        let mut header = serde_json::Map::new();
        header.insert("format_version".into(), Value::from(CKPT_VERSION));
        header.insert(
            "metadata".into(),
            Value::Object(self.metadata.iter().map(|(k, v)| (k.clone(), v.clone())).collect()),
        );
        header.insert("spec".into(), serde_json::to_value(self.spec).expect("spec serializes"));
        Value::Object(header).to_string()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_VERSION.as_bytes());
        out.push(b'\n');
        let header = self.header_json();
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            if !valid_name(name) {
                return Err(ModelError::BadName(name.clone()));
            }
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE.len() as u8);
            out.extend_from_slice(DTYPE.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(CKPT_VERSION.len() + 1)?;
        if magic != format!("{CKPT_VERSION}\n").as_bytes() {
            return Err(ModelError::Format("missing ckpt-v1 header".into()));
        }
        let header_len = r.u64()? as usize;
        let header: Value = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| ModelError::Format(format!("header JSON: {e}")))?;
        let spec: ModelSpec = serde_json::from_value(header.get("spec").cloned().unwrap_or(Value::Null))
            .map_err(|e| ModelError::Format(format!("spec: {e}")))?;
        let metadata = match header.get("metadata") {
            Some(Value::Object(m)) => m.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            _ => return Err(ModelError::Format("metadata must be an object".into())),
        };
        let count = r.u64()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| ModelError::Format("tensor name is not UTF-8".into()))?;
            if !valid_name(&name) {
                return Err(ModelError::BadName(name));
            }
            let dtype_len = r.take(1)?[0] as usize;
            let dtype = r.take(dtype_len)?;
            if dtype != DTYPE.as_bytes() {
                return Err(ModelError::Format(format!(
                    "tensor `{name}` has unsupported dtype {:?}",
                    String::from_utf8_lossy(dtype)
                )));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(ModelError::Format("trailing bytes after last tensor".into()));
        }
        Ok(Self {
            spec,
            tensors,
            metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ModelError::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
