//! `APCK1` checkpoint container.
//!
//! Layout: the 5-byte magic `APCK1`, a little-endian u64 header length, a
//! JSON header, then every tensor as little-endian f32 in directory order.
//! Offsets and lengths in the directory count f32 elements from the start
//! of the payload.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{DecoderLayer, Model, ModelConfig};
use crate::real::Real;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"APCK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: ModelConfig,
    pub seed: u64,
    /// Free-form run provenance (command, step, parent hash, ...).
    pub provenance: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

fn ck_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Checkpoint(msg.into()))
}

/// Serializes `model` (as f32) with its header.
pub fn to_bytes<T: Real>(model: &Model<T>, seed: u64, provenance: serde_json::Value) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, t) in model.tensors() {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            len: t.numel(),
        });
        offset += t.numel();
    }
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        config: model.config.clone(),
        seed,
        provenance,
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + 4 * offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in model.tensors() {
        for &x in t.data() {
            out.extend_from_slice(&(x.f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a checkpoint, verifying that the directory exactly tiles the payload.
pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<(Model<T>, CheckpointHeader)> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return ck_err("missing APCK1 magic");
    }
    let hlen = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")) as usize;
    let body = &bytes[13..];
    if hlen > body.len() {
        return ck_err(format!("header length {hlen} exceeds file size"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&body[..hlen])?;
    if header.version != FORMAT_VERSION {
        return ck_err(format!("unsupported version {}", header.version));
    }
    let payload = &body[hlen..];
    if payload.len() % 4 != 0 {
        return ck_err("payload is not a whole number of f32 values");
    }
    let floats = payload.len() / 4;
    let mut expected_offset = 0;
    for e in &header.tensors {
        if e.offset != expected_offset || e.shape.iter().product::<usize>() != e.len {
            return ck_err(format!("directory entry {} is inconsistent", e.name));
        }
        expected_offset += e.len;
    }
    if expected_offset != floats {
        return ck_err(format!("directory covers {expected_offset} values, payload holds {floats}"));
    }
    let read = |e: &TensorEntry| -> Result<Tensor<T>> {
        let data = payload[4 * e.offset..4 * (e.offset + e.len)]
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        Tensor::new(e.shape.clone(), data)
    };
    let config = header.config.clone();
    config.validate()?;
    let n = config.n_layers();
    let names: Vec<String> = std::iter::once("embedding".to_string())
        .chain((0..n).flat_map(|i| DecoderLayer::<T>::TENSOR_NAMES.iter().map(move |t| format!("layers.{i}.{t}"))))
        .chain(["final_norm".to_string(), "lm_head".to_string()])
        .collect();
    if header.tensors.iter().map(|e| &e.name).ne(names.iter()) {
        return ck_err("tensor directory does not match the model layout");
    }
    let mut it = header.tensors.iter();
    let mut next = || read(it.next().expect("length checked above"));
    let embedding = next()?;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        layers.push(DecoderLayer {
            attn_norm: next()?,
            wq: next()?,
            wk: next()?,
            wv: next()?,
            wo: next()?,
            mlp_norm: next()?,
            w_up: next()?,
            w_gate: next()?,
            w_down: next()?,
        });
    }
    let final_norm = next()?;
    let lm_head = next()?;
    let model = Model {
        config,
        embedding,
        layers,
        final_norm,
        lm_head,
    };
    model.validate().map_err(|e| Error::Checkpoint(format!("shapes disagree with config: {e}")))?;
    Ok((model, header))
}

pub fn save<T: Real>(path: &Path, model: &Model<T>, seed: u64, provenance: serde_json::Value) -> Result<String> {
    let bytes = to_bytes(model, seed, provenance)?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn load<T: Real>(path: &Path) -> Result<(Model<T>, CheckpointHeader)> {
    from_bytes(&std::fs::read(path)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of the f32 weights alone (header excluded), for comparing models.
pub fn weights_hash<T: Real>(model: &Model<T>) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&model.config).expect("config serializes"));
    for (_, t) in model.tensors() {
        for &x in t.data() {
            h.update((x.f64() as f32).to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depgraph::{apply_prune, CoupledGroup, GroupKind, PrunePlan};

    fn model() -> Model<f32> {
        let m = Model::init(ModelConfig::uniform(20, 8, 2, 2, 8, 8).unwrap(), 1).unwrap();
        let plan = PrunePlan::from_groups([CoupledGroup { layer: 1, kind: GroupKind::MlpChannel, index: 3 }]);
        apply_prune(&m, &plan).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = model();
        let bytes = to_bytes(&m, 7, serde_json::json!({"cmd": "test"})).unwrap();
        let (back, header) = from_bytes::<f32>(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(header.seed, 7);
        assert_eq!(to_bytes(&back, 7, header.provenance).unwrap(), bytes);
    }

    #[test]
    fn corrupted_files_fail() {
        let bytes = to_bytes(&model(), 0, serde_json::Value::Null).unwrap();
        assert!(from_bytes::<f32>(&bytes[..bytes.len() - 4]).is_err());
        let mut extra = bytes.clone();
        extra.extend_from_slice(&[0; 4]);
        assert!(from_bytes::<f32>(&extra).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes::<f32>(&bad).is_err());
    }

    #[test]
    fn file_round_trip_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.apck");
        let m = model();
        let h = save(&p, &m, 1, serde_json::Value::Null).unwrap();
        assert_eq!(h, sha256_hex(&std::fs::read(&p).unwrap()));
        assert_eq!(load::<f32>(&p).unwrap().0, m);
        assert_ne!(weights_hash(&m), weights_hash(&Model::<f32>::init(m.config.clone(), 2).unwrap()));
    }
}
