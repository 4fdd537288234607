//! `BWXC` checkpoint files.
//!
//! Layout (all integers little-endian):
//! magic `BWXC`, u32 version, u32 JSON length, JSON metadata, u32 record
//! count, then per record: u32 name length, UTF-8 name, u32 rank, u64 dims,
//! f32 values. Adam moments are stored as extra records named
//! `<param>#adam_m` and `<param>#adam_v`.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{WaveNet, WaveNetConfig, WaveNetError};
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"BWXC";
const ADAM_M: &str = "#adam_m";
const ADAM_V: &str = "#adam_v";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("bad metadata: {0}")]
    Metadata(String),
    #[error("bad record: {0}")]
    Record(String),
    #[error(transparent)]
    Model(#[from] WaveNetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Metadata {
    config: WaveNetConfig,
    train_step: u64,
    #[serde(default)]
    trainer: Option<serde_json::Value>,
}

/// A model plus the training position it was saved at.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: WaveNet,
    pub train_step: u64,
    /// Opaque trainer settings carried alongside the weights.
    pub trainer: Option<serde_json::Value>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_record(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.dims().len() as u32);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>, CheckpointError> {
    let meta = Metadata {
        config: ckpt.model.config().clone(),
        train_step: ckpt.train_step,
        trainer: ckpt.trainer.clone(),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| CheckpointError::Metadata(e.to_string()))?;
    let store = ckpt.model.params();
    let mut out = Vec::with_capacity(store.num_scalars() * 12 + json.len() + 64);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, json.len() as u32);
    out.extend_from_slice(&json);
    put_u32(&mut out, 3 * store.len() as u32);
    for p in store.iter() {
        put_record(&mut out, &p.name, &p.value);
    }
    for p in store.iter() {
        put_record(&mut out, &format!("{}{ADAM_M}", p.name), &p.adam_m);
        put_record(&mut out, &format!("{}{ADAM_V}", p.name), &p.adam_v);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(CheckpointError::Truncated(self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let json_len = r.u32()? as usize;
    let meta: Metadata = serde_json::from_slice(r.take(json_len)?)
        .map_err(|e| CheckpointError::Metadata(e.to_string()))?;
    let count = r.u32()?;

    let mut values = ParamStore::new();
    let mut moments: Vec<(String, Tensor<f32>)> = Vec::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::Record("name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(CheckpointError::Record(format!("{name}: rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64()? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= bytes.len() / 4)
            .ok_or_else(|| CheckpointError::Record(format!("{name}: dims {dims:?}")))?;
        let raw = r.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::from_vec(&dims, data).map_err(|e| CheckpointError::Record(e.to_string()))?;
        if name.ends_with(ADAM_M) || name.ends_with(ADAM_V) {
            moments.push((name, t));
        } else {
            values
                .add(name, t)
                .map_err(|e| CheckpointError::Record(e.to_string()))?;
        }
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Record(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    for (name, t) in moments {
        let (base, is_m) = match name.strip_suffix(ADAM_M) {
            Some(b) => (b, true),
            None => (name.strip_suffix(ADAM_V).expect("suffix checked"), false),
        };
        let id = values
            .by_name(base)
            .ok_or_else(|| CheckpointError::Record(format!("{name}: no matching parameter")))?;
        let p = values.get_mut(id);
        if t.dims() != p.value.dims() {
            return Err(CheckpointError::Record(format!("{name}: dims differ from parameter")));
        }
        if is_m {
            p.adam_m = t;
        } else {
            p.adam_v = t;
        }
    }
    let model = WaveNet::from_params(meta.config, &values)?;
    Ok(Checkpoint {
        model,
        train_step: meta.train_step,
        trainer: meta.trainer,
    })
}

/// Writes to a sibling temp file first, so an interrupted save never
/// replaces a good checkpoint with a partial one.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let bytes = encode_checkpoint(ckpt)?;
    let io_err = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io_err)?;
    f.write_all(&bytes).map_err(io_err)?;
    f.sync_all().map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
