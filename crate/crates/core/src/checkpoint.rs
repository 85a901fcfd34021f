//! Single-file tensor checkpoints.
//!
//! Layout: the 8-byte magic `CAETFv1\0`, a little-endian `u64` header
//! length, a UTF-8 JSON header `{tensors: [{name, dtype, shape, offset,
//! trainable}], meta}`, then the raw little-endian payloads in header
//! order. Offsets are relative to the start of the payload section.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{DataError, Error, Result};
use crate::io;
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

pub const MAGIC: &[u8; 8] = b"CAETFv1\0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorEntry>,
    meta: Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Element = f32> {
    pub params: ParamStore<T>,
    pub meta: Value,
}

pub fn to_bytes<T: Element>(params: &ParamStore<T>, meta: &Value) -> Result<Vec<u8>> {
    let mut offset = 0;
    let tensors = params
        .iter()
        .map(|(name, p)| {
            let entry = TensorEntry {
                name: name.to_string(),
                dtype: T::DTYPE.to_string(),
                shape: p.tensor.shape().to_vec(),
                offset,
                trainable: p.trainable,
            };
            offset += p.tensor.numel() * T::BYTES;
            entry
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        tensors,
        meta: meta.clone(),
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, p) in params.iter() {
        for &v in p.tensor.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    DataError::Invalid(format!("checkpoint: {}", msg.into())).into()
}

pub fn from_bytes<T: Element>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let payload_start = 16usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..payload_start]).map_err(|e| corrupt(format!("header: {e}")))?;
    let payload = &bytes[payload_start..];
    let mut params = ParamStore::new();
    let mut expected_offset = 0;
    for entry in header.tensors {
        if entry.dtype != T::DTYPE {
            return Err(corrupt(format!("{} has dtype {}, expected {}", entry.name, entry.dtype, T::DTYPE)));
        }
        let n: usize = entry.shape.iter().product();
        let end = entry.offset + n * T::BYTES;
        if entry.offset != expected_offset || end > payload.len() {
            return Err(corrupt(format!("{} payload out of place", entry.name)));
        }
        let data = payload[entry.offset..end].chunks_exact(T::BYTES).map(T::read_le).collect();
        params
            .insert(entry.name, Tensor::new(entry.shape, data)?, entry.trainable)
            .map_err(|e| corrupt(e.to_string()))?;
        expected_offset = end;
    }
    if expected_offset != payload.len() {
        return Err(corrupt("trailing bytes after the last tensor"));
    }
    Ok(Checkpoint {
        params,
        meta: header.meta,
    })
}

pub fn save<T: Element>(path: &Path, params: &ParamStore<T>, meta: &Value) -> Result<()> {
    io::write_atomic(path, &to_bytes(params, meta)?)
}

pub fn load<T: Element>(path: &Path) -> Result<Checkpoint<T>> {
    from_bytes(&io::read(path)?)
}

/// Copies every tensor of `source` into `target`. Both must hold exactly
/// the same names and shapes; trainable flags come from `source`.
pub fn restore<T: Element>(target: &mut ParamStore<T>, source: &ParamStore<T>) -> Result<()> {
    if target.len() != source.len() {
        return Err(corrupt(format!("{} tensors for a model with {}", source.len(), target.len())));
    }
    for (name, p) in source.iter() {
        if !target.contains(name) {
            return Err(corrupt(format!("unexpected tensor {name}")));
        }
        target.set(name, p.tensor.clone())?;
        target.set_trainable(name, p.trainable)?;
    }
    Ok(())
}

/// Joins several stores into one, prefixing each tensor name.
pub fn merge_prefixed<T: Element>(parts: &[(&str, &ParamStore<T>)]) -> Result<ParamStore<T>> {
    let mut out = ParamStore::new();
    for (prefix, store) in parts {
        for (name, p) in store.iter() {
            out.insert(format!("{prefix}{name}"), p.tensor.clone(), p.trainable)?;
        }
    }
    Ok(out)
}

/// The tensors whose names start with `prefix`, with the prefix removed.
pub fn split_prefix<T: Element>(store: &ParamStore<T>, prefix: &str) -> Result<ParamStore<T>> {
    let mut out = ParamStore::new();
    for (name, p) in store.iter() {
        if let Some(rest) = name.strip_prefix(prefix) {
            out.insert(rest, p.tensor.clone(), p.trainable)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::from_fn([2, 3], |i| i as f32 * 0.1 - 0.2), true).unwrap();
        s.insert("b", Tensor::scalar(f32::MIN_POSITIVE), false).unwrap();
        s
    }

    #[test]
    fn bytes_round_trip() {
        let meta = serde_json::json!({"kind": "test"});
        let bytes = to_bytes(&store(), &meta).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let ck: Checkpoint = from_bytes(&bytes).unwrap();
        assert_eq!(ck.params, store());
        assert_eq!(ck.meta, meta);
        assert_eq!(to_bytes(&ck.params, &ck.meta).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = to_bytes(&store(), &Value::Null).unwrap();
        assert!(from_bytes::<f32>(&bytes[..bytes.len() - 1]).is_err());
        assert!(from_bytes::<f32>(b"nonsense-bytes-here").is_err());
        assert!(from_bytes::<f64>(&bytes).is_err());
    }

    #[test]
    fn prefixes() {
        let merged = merge_prefixed(&[("cae.", &store()), ("clf.", &store())]).unwrap();
        assert_eq!(merged.len(), 4);
        assert_eq!(split_prefix(&merged, "clf.").unwrap(), store());
        let mut target = store();
        target.set("a", Tensor::zeros([2, 3])).unwrap();
        restore(&mut target, &store()).unwrap();
        assert_eq!(target, store());
        assert!(restore(&mut target, &merged).is_err());
    }
}
