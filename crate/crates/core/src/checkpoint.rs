//! JSON checkpoints with base64-encoded tensors.
//!
//! Every file is a JSON object with a `format` tag, a `version`, the element
//! `dtype` of the model, and a `params` list. Each parameter entry holds its
//! name, group, shape, and its values as little-endian `f64` bytes in
//! standard base64 (so both precisions round-trip exactly). The remaining
//! fields depend on the checkpoint kind: search checkpoints add the run
//! configuration, optimizer state, counters and log; weight checkpoints add
//! the genotype, network configuration and running normalization statistics.

use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamGroup, ParamStore, Scalar};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: String,
}

pub fn encode_f64(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_f64(text: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::Checkpoint(format!("bad tensor encoding: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Checkpoint("tensor byte length is not a multiple of 8".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub fn encode_store<F: Scalar>(store: &ParamStore<F>) -> Vec<TensorRecord> {
    store
        .iter()
        .map(|(_, p)| TensorRecord {
            name: p.name.clone(),
            group: p.group,
            shape: p.tensor.shape().to_vec(),
            data: encode_f64(&p.tensor.to_f64_vec()),
        })
        .collect()
}

/// Overwrites the values of `store` with `records`. Everything is decoded
/// and checked against the store's layout before any value changes.
pub fn load_into_store<F: Scalar>(records: &[TensorRecord], store: &mut ParamStore<F>) -> Result<()> {
    if records.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} tensors, model has {}",
            records.len(),
            store.len()
        )));
    }
    let mut decoded = Vec::with_capacity(records.len());
    for (r, (_, p)) in records.iter().zip(store.iter()) {
        if r.name != p.name || r.group != p.group || r.shape != p.tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match model tensor {} {:?}",
                r.name,
                r.shape,
                p.name,
                p.tensor.shape()
            )));
        }
        let values = decode_f64(&r.data)?;
        if values.len() != p.tensor.numel() {
            return Err(Error::Checkpoint(format!("tensor {} has {} values", r.name, values.len())));
        }
        decoded.push(values);
    }
    for (i, values) in decoded.into_iter().enumerate() {
        let t = store.tensor_mut(crate::tensor::ParamId(i));
        t.data_mut().iter_mut().zip(values).for_each(|(d, v)| *d = F::lit(v));
        t.clear_grad();
    }
    Ok(())
}

/// Common header of every checkpoint file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub dtype: String,
}

impl Header {
    pub fn new<F: Scalar>(format: &str) -> Self {
        Header {
            format: format.to_string(),
            version: CHECKPOINT_VERSION,
            dtype: F::DTYPE.to_string(),
        }
    }

    pub fn check<F: Scalar>(&self, format: &str) -> Result<()> {
        if self.format != format {
            return Err(Error::Checkpoint(format!("expected a {format} checkpoint, found {}", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {} is not supported (engine version {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        if self.dtype != F::DTYPE {
            return Err(Error::Checkpoint(format!("checkpoint dtype {} differs from {}", self.dtype, F::DTYPE)));
        }
        Ok(())
    }
}

/// Writes pretty JSON through a temporary file so a crash never leaves a
/// truncated checkpoint behind.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_string_pretty(value)? + "\n")?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f64_bytes_round_trip() {
        let v = vec![0.1, -2.5e-300, f64::MAX, 0.0];
        assert_eq!(decode_f64(&encode_f64(&v)).unwrap(), v);
        assert!(decode_f64("not base64!").is_err());
    }
}
