//! Named parameter storage and the on-disk checkpoint format.
//!
//! A checkpoint file is an 8-byte little-endian header length, a JSON header
//! (parameter names and shapes, free-form hyperparameters, step counter), and
//! the parameter values as little-endian `f64` in header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<Tensor<S>>,
    frozen: bool,
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            frozen: false,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<S>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.values[id.0]
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<S>] {
        &self.values
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub(crate) fn value_mut(&mut self, index: usize) -> &mut Tensor<S> {
        &mut self.values[index]
    }

    /// Replaces one parameter value. Refused once frozen.
    pub fn set(&mut self, id: ParamId, value: Tensor<S>) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen(format!("cannot overwrite {}", self.names[id.0])));
        }
        if value.shape() != self.values[id.0].shape() {
            return Err(crate::error::shape_err(
                "ParamStore::set",
                format!("{:?} vs {:?}", value.shape(), self.values[id.0].shape()),
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Registers every parameter on `tape`; frozen stores bind as constants.
    pub fn bind<'t>(&self, tape: &'t Tape<S>) -> Result<Vec<Var<'t, S>>> {
        self.values
            .iter()
            .map(|v| tape.leaf(v.clone(), !self.frozen))
            .collect()
    }

    /// SHA-256 over names, shapes and little-endian `f64` values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            h.update(name.as_bytes());
            for &d in v.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in v.data() {
                h.update(x.to_f64_lossy().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_checkpoint(&self, hyperparameters: serde_json::Value, step: u64) -> Checkpoint {
        Checkpoint {
            params: self
                .names
                .iter()
                .cloned()
                .zip(self.values.iter().map(|v| v.cast::<f64>()))
                .collect(),
            hyperparameters,
            step,
        }
    }

    /// Loads values by name; every parameter must be present with its shape.
    pub fn load_from(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if self.frozen {
            return Err(Error::Frozen("cannot load into a frozen store".into()));
        }
        if ckpt.params.len() != self.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model expects {}",
                ckpt.params.len(),
                self.len()
            )));
        }
        for (i, name) in self.names.iter().enumerate() {
            let (_, t) = ckpt
                .params
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))?;
            if t.shape() != self.values[i].shape() {
                return Err(Error::Format(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = t.cast();
        }
        Ok(())
    }
}

/// In-memory checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<(String, Tensor<f64>)>,
    pub hyperparameters: serde_json::Value,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    params: Vec<ParamEntry>,
    hyperparameters: serde_json::Value,
    step: u64,
}

const FORMAT_TAG: &str = "hydraview-checkpoint-v1";

pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let header = Header {
        format: FORMAT_TAG.into(),
        params: ckpt
            .params
            .iter()
            .map(|(n, t)| ParamEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        hyperparameters: ckpt.hyperparameters.clone(),
        step: ckpt.step,
    };
    let mut payload = Vec::new();
    for (_, t) in &ckpt.params {
        for &x in t.data() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let buf = join_header(&header, &payload)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path.as_ref())
        .map_err(|e| Error::Missing(format!("{}: {e}", path.as_ref().display())))?
        .read_to_end(&mut bytes)?;
    let (header, payload) = split_header::<Header>(&bytes)?;
    if header.format != FORMAT_TAG {
        return Err(Error::Format(format!("unknown checkpoint format {}", header.format)));
    }
    let mut off = 0;
    let mut params = Vec::with_capacity(header.params.len());
    for p in header.params {
        let n: usize = p.shape.iter().product();
        let end = off + 8 * n;
        let chunk = payload
            .get(off..end)
            .ok_or_else(|| Error::Format(format!("payload truncated at {}", p.name)))?;
        let data = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push((p.name, Tensor::new(p.shape, data)?));
        off = end;
    }
    if off != payload.len() {
        return Err(Error::Format("trailing bytes after checkpoint payload".into()));
    }
    Ok(Checkpoint {
        params,
        hyperparameters: header.hyperparameters,
        step: header.step,
    })
}

/// Splits a length-prefixed JSON header from its binary payload.
pub(crate) fn split_header<H: serde::de::DeserializeOwned>(bytes: &[u8]) -> Result<(H, &[u8])> {
    let len_bytes = bytes
        .get(..8)
        .ok_or_else(|| Error::Format("file shorter than header length".into()))?;
    let len = u64::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
    let json = bytes
        .get(8..8 + len)
        .ok_or_else(|| Error::Format("header truncated".into()))?;
    Ok((serde_json::from_slice(json)?, &bytes[8 + len..]))
}

/// Writes a length-prefixed JSON header followed by `payload`.
pub(crate) fn join_header<H: Serialize>(header: &H, payload: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut buf = Vec::with_capacity(8 + json.len() + payload.len());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(payload);
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_file_round_trip() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::from_fn(vec![2, 3], |i| i as f64 * 0.1 - 0.2));
        store.add("b", Tensor::from_fn(vec![3], |i| -(i as f64)));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ckpt = store.to_checkpoint(serde_json::json!({"d": 3}), 17);
        write_checkpoint(&path, &ckpt).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);

        let bytes = fs::read(&path).unwrap();
        let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 8 + hlen + 9 * 8);
        // first payload value is w[0] = -0.2, little-endian f64
        assert_eq!(
            f64::from_le_bytes(bytes[8 + hlen..16 + hlen].try_into().unwrap()),
            -0.2
        );

        let mut other = ParamStore::<f64>::new();
        other.add("w", Tensor::zeros(vec![2, 3]));
        other.add("b", Tensor::zeros(vec![3]));
        other.load_from(&back).unwrap();
        assert_eq!(other.content_hash(), store.content_hash());

        let mut wrong = ParamStore::<f64>::new();
        wrong.add("w", Tensor::zeros(vec![3, 2]));
        wrong.add("b", Tensor::zeros(vec![3]));
        assert!(wrong.load_from(&back).is_err());
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::zeros(vec![4]));
        write_checkpoint(&path, &store.to_checkpoint(serde_json::Value::Null, 0)).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn frozen_store_refuses_writes() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::zeros(vec![2]));
        store.freeze();
        assert!(store.set(id, Tensor::zeros(vec![2])).is_err());
    }
}
