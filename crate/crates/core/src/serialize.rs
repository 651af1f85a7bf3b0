//! Versioned binary model files.
//!
//! Layout (little-endian): magic `NTCM`, format version `u16`, model kind
//! `u8`, a `u32`-length-prefixed JSON descriptor holding the model structure
//! with every array's values removed, a `u32` array count, then each array as
//! a `u32` length followed by that many `f64` values. Arrays appear in the
//! order the descriptor is walked.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::error::{NtcError, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"NTCM";
pub const MODEL_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum ModelKind {
    Vq = 1,
    Ntc = 2,
}

fn is_tensor(map: &serde_json::Map<String, Value>) -> bool {
    map.len() == 2 && map.contains_key("shape") && map.contains_key("data")
}

fn strip(v: &mut Value, arrays: &mut Vec<Vec<f64>>) -> Result<()> {
    match v {
        Value::Object(map) if is_tensor(map) => {
            let data = map.get_mut("data").expect("checked");
            let values: Vec<f64> = serde_json::from_value(data.take())
                .map_err(|e| NtcError::Serialization(e.to_string()))?;
            arrays.push(values);
            *data = Value::Array(Vec::new());
        }
        Value::Object(map) => {
            for (_, child) in map.iter_mut() {
                strip(child, arrays)?;
            }
        }
        Value::Array(items) => {
            for child in items {
                strip(child, arrays)?;
            }
        }
        _ => {}
    }
    Ok(())
}

fn fill(v: &mut Value, arrays: &mut std::vec::IntoIter<Vec<f64>>) -> Result<()> {
    match v {
        Value::Object(map) if is_tensor(map) => {
            let values = arrays
                .next()
                .ok_or_else(|| NtcError::Serialization("too few arrays".into()))?;
            map.insert("data".into(), serde_json::to_value(values).expect("f64 list"));
        }
        Value::Object(map) => {
            for (_, child) in map.iter_mut() {
                fill(child, arrays)?;
            }
        }
        Value::Array(items) => {
            for child in items {
                fill(child, arrays)?;
            }
        }
        _ => {}
    }
    Ok(())
}

pub fn to_bytes<T: Serialize>(kind: ModelKind, model: &T) -> Result<Vec<u8>> {
    let mut value = serde_json::to_value(model).map_err(|e| NtcError::Serialization(e.to_string()))?;
    let mut arrays = Vec::new();
    strip(&mut value, &mut arrays)?;
    let desc = serde_json::to_vec(&value).map_err(|e| NtcError::Serialization(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.push(kind as u8);
    out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    out.extend_from_slice(&desc);
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for a in &arrays {
        out.extend_from_slice(&(a.len() as u32).to_le_bytes());
        for v in a {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(NtcError::Serialization("truncated model file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn from_bytes<T: DeserializeOwned>(kind: ModelKind, bytes: &[u8]) -> Result<T> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MODEL_MAGIC {
        return Err(NtcError::Serialization("not a model file".into()));
    }
    let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
    if version != MODEL_VERSION {
        return Err(NtcError::Serialization(format!("unsupported model version {version}")));
    }
    let k = r.take(1)?[0];
    if k != kind as u8 {
        return Err(NtcError::Serialization(format!(
            "model kind {k}, expected {}",
            kind as u8
        )));
    }
    let dlen = r.u32()? as usize;
    let mut value: Value =
        serde_json::from_slice(r.take(dlen)?).map_err(|e| NtcError::Serialization(e.to_string()))?;
    let count = r.u32()? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let raw = r.take(len * 8)?;
        arrays.push(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect::<Vec<f64>>(),
        );
    }
    if r.pos != bytes.len() {
        return Err(NtcError::Serialization("trailing bytes in model file".into()));
    }
    let mut it = arrays.into_iter();
    fill(&mut value, &mut it)?;
    if it.next().is_some() {
        return Err(NtcError::Serialization("too many arrays".into()));
    }
    serde_json::from_value(value).map_err(|e| NtcError::Serialization(e.to_string()))
}

/// Human-readable JSON rendering of a model.
pub fn to_text<T: Serialize>(model: &T) -> Result<String> {
    serde_json::to_string_pretty(model).map_err(|e| NtcError::Serialization(e.to_string()))
}

pub fn from_text<T: DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| NtcError::Serialization(e.to_string()))
}
