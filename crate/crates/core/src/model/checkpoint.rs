//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u32` format version, `u64` header
//! length, a JSON header (config, parameter names and shapes, metadata), then
//! every parameter as raw little-endian `f64` in registration order, followed
//! by the Adam first and second moments when present.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::{AdamConfig, AdamState};

const MAGIC: &[u8; 8] = b"TMOTCKPT";
const VERSION: u32 = 1;

/// Training bookkeeping stored next to the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointMeta {
    pub tool_version: String,
    pub epochs_done: usize,
    /// `dataset/split` tags of the files the weights were trained on.
    pub train_tags: Vec<String>,
    /// Scene ids seen in training, used to reject overlapping evaluation data.
    pub train_scene_ids: Vec<String>,
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<AdamState>,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    params: Vec<(String, Vec<usize>)>,
    optimizer: Option<OptHeader>,
    meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct OptHeader {
    config: AdamConfig,
    step: u64,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> std::io::Result<()> {
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor<R: Read>(r: &mut R, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf).map_err(|e| bad(format!("truncated tensor data: {e}")))?;
    let data = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

pub fn write_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> Result<()> {
    let store = &ckpt.model.store;
    let header = Header {
        model: ckpt.model.config.clone(),
        params: store.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect(),
        optimizer: ckpt.optimizer.as_ref().map(|o| OptHeader {
            config: o.config,
            step: o.step,
        }),
        meta: ckpt.meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let io = |e| Error::io("<checkpoint>", e);
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&json).map_err(io)?;
    for (_, t) in store.iter() {
        write_tensor(&mut w, t).map_err(io)?;
    }
    if let Some(o) = &ckpt.optimizer {
        for t in o.m.iter().chain(&o.v) {
            write_tensor(&mut w, t).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("file too short"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|_| bad("missing version"))?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(|_| bad("missing header length"))?;
    let len = u64::from_le_bytes(b8) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(format!("bad header: {e}")))?;

    let mut model = Model::new(header.model)?;
    let mut named = Vec::with_capacity(header.params.len());
    for (name, shape) in &header.params {
        named.push((name.clone(), read_tensor(&mut r, shape)?));
    }
    model.store.load(named)?;
    let optimizer = match header.optimizer {
        Some(o) => {
            let mut m = Vec::with_capacity(header.params.len());
            let mut v = Vec::with_capacity(header.params.len());
            for (_, shape) in &header.params {
                m.push(read_tensor(&mut r, shape)?);
            }
            for (_, shape) in &header.params {
                v.push(read_tensor(&mut r, shape)?);
            }
            Some(AdamState {
                config: o.config,
                step: o.step,
                m,
                v,
            })
        }
        None => None,
    };
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io("<checkpoint>", e))? != 0 {
        return Err(bad("trailing bytes after checkpoint data"));
    }
    Ok(Checkpoint {
        model,
        optimizer,
        meta: header.meta,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(BufWriter::new(f), ckpt)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ckpt() -> Checkpoint {
        let model = Model::new(ModelConfig {
            hidden_dim: 8,
            heads: 2,
            layers_stage1: 1,
            layers_stage2: 1,
            k: 2,
            init_seed: 3,
            ..ModelConfig::default()
        })
        .unwrap();
        let mut opt = AdamState::new(&model.store, AdamConfig::default());
        opt.step = 7;
        opt.m[0].data_mut()[0] = 0.25;
        Checkpoint {
            model,
            optimizer: Some(opt),
            meta: CheckpointMeta {
                epochs_done: 2,
                train_tags: vec!["synth/train".into()],
                ..CheckpointMeta::default()
            },
        }
    }

    #[test]
    fn round_trip() {
        let c = ckpt();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &c).unwrap();
        assert_eq!(read_checkpoint(buf.as_slice()).unwrap(), c);
    }

    #[test]
    fn corruption_is_detected() {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ckpt()).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_checkpoint(extra.as_slice()).is_err());
        buf[0] = b'X';
        assert!(matches!(read_checkpoint(buf.as_slice()), Err(Error::Checkpoint(_))));
    }
}
