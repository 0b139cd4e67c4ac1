//! Binary training checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then the parameter and buffer tensors as raw little-endian f32
//! so a reload is bit-exact. SGD keeps no optimizer state, and the
//! per-epoch generators are re-derived from `(seed, fold, epoch)`, so the
//! header's epoch counter is the whole random state.

use std::path::Path;

use depnet_engine::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::datapipe::write_atomic;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::trainer::{EpochRecord, Trainer};

const MAGIC: &[u8; 8] = b"DEPNETCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    fold: usize,
    epoch: usize,
    seed: u64,
    history: Vec<EpochRecord>,
    adjacency: Vec<f64>,
    /// (name, shape) in blob order; parameters first.
    params: Vec<(String, Vec<usize>)>,
    buffers: Vec<(String, Vec<usize>)>,
}

fn layout(store: &ParamStore<f32>) -> Vec<(String, Vec<usize>)> {
    store.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect()
}

pub fn encode(trainer: &Trainer) -> Result<Vec<u8>> {
    let m = &trainer.model;
    let header = Header {
        config: m.config.clone(),
        fold: trainer.fold,
        epoch: trainer.epoch,
        seed: m.config.hyper.seed,
        history: trainer.history.clone(),
        adjacency: m.adjacency.data().to_vec(),
        params: layout(&m.params),
        buffers: layout(&m.buffers),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Invariant(format!("checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(json.len() + 4 * (m.params.num_scalars() + m.buffers.num_scalars()) + 20);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in m.params.iter().chain(m.buffers.iter()) {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Trainer> {
    let bad = |msg: &str| Error::Data(format!("invalid checkpoint: {msg}"));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let json = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| bad(&e.to_string()))?;
    let mut blob = &bytes[20 + hlen..];
    let mut read = |entries: &[(String, Vec<usize>)]| -> Result<ParamStore<f32>> {
        let mut store = ParamStore::new();
        for (name, shape) in entries {
            let n: usize = shape.iter().product();
            if blob.len() < 4 * n {
                return Err(bad(&format!("truncated tensor {name}")));
            }
            let data = blob[..4 * n].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            blob = &blob[4 * n..];
            store.insert(name.clone(), Tensor::new(shape.clone(), data)?);
        }
        Ok(store)
    };
    let params = read(&header.params)?;
    let buffers = read(&header.buffers)?;
    if !blob.is_empty() {
        return Err(bad("trailing bytes"));
    }
    let v = header.config.channels;
    let adjacency = Tensor::new([v, v], header.adjacency).map_err(|e| bad(&e.to_string()))?;
    // Re-initialize once to confirm the stored tensors match the config.
    let mut model = Model::<f32>::new(header.config, adjacency, 0)?;
    if layout(&model.params) != layout(&params) || layout(&model.buffers) != layout(&buffers) {
        return Err(bad("tensor layout does not match the stored configuration"));
    }
    model.params = params;
    model.buffers = buffers;
    Ok(Trainer { model, fold: header.fold, epoch: header.epoch, history: header.history })
}

impl Trainer {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &encode(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
