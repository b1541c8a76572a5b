//! The `UCPM` checkpoint format.
//!
//! ```text
//! "UCPM" | version u32 | meta_len u32 | meta_crc u32 | meta JSON
//! 6 × ( count u32 | count × f32 | crc32 of count+values )
//! ```
//!
//! Blocks appear in [`BLOCK_NAMES`](super::BLOCK_NAMES) order. All integers
//! and floats are little-endian. `meta_crc` covers the JSON bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Blocks, ModelParams, TrainConfig, CONV_CHANNELS, KERNEL};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"UCPM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_channels: usize,
    pub conv_channels: usize,
    pub kernel: usize,
    pub k_max: usize,
    pub pooling: String,
}

impl Architecture {
    pub fn for_params(params: &ModelParams) -> Self {
        Architecture {
            input_channels: params.input_channels,
            conv_channels: CONV_CHANNELS,
            kernel: KERNEL,
            k_max: params.k_max,
            pooling: "masked_mean".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub architecture: Architecture,
    pub train_config: TrainConfig,
    pub best_epoch: usize,
    pub val_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(params: ModelParams, train_config: TrainConfig) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                architecture: Architecture::for_params(&params),
                train_config,
                best_epoch: 0,
                val_f1: 0.0,
            },
            params,
        }
    }
}

pub fn write_checkpoint<W: Write>(w: &mut W, ckpt: &Checkpoint) -> Result<()> {
    ckpt.params.check_finite()?;
    let meta = serde_json::to_vec(&ckpt.meta)?;
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(&crc32fast::hash(&meta).to_le_bytes())?;
    w.write_all(&meta)?;
    for (_, block) in ckpt.params.blocks.iter() {
        let mut bytes = Vec::with_capacity(4 + 4 * block.len());
        bytes.extend_from_slice(&(block.len() as u32).to_le_bytes());
        for v in block {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
        w.write_all(&crc32fast::hash(&bytes).to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, ckpt)?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Truncated(format!("checkpoint ends inside {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn expected_len(name: &str, arch: &Architecture) -> usize {
    let kk = arch.kernel * arch.kernel;
    match name {
        "conv1.weight" => arch.conv_channels * arch.input_channels * kk,
        "conv2.weight" => arch.conv_channels * arch.conv_channels * kk,
        "out.bias" => 1,
        _ => arch.conv_channels,
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "header")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = cur.u32("header")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let meta_len = cur.u32("header")? as usize;
    let meta_crc = cur.u32("header")?;
    let meta_bytes = cur.take(meta_len, "metadata")?;
    let computed = crc32fast::hash(meta_bytes);
    if computed != meta_crc {
        return Err(Error::ChecksumMismatch {
            what: "checkpoint metadata".into(),
            stored: meta_crc,
            computed,
        });
    }
    let meta: CheckpointMeta = serde_json::from_slice(meta_bytes)
        .map_err(|e| Error::Corrupt(format!("checkpoint metadata: {e}")))?;
    let arch = &meta.architecture;
    if arch.conv_channels != CONV_CHANNELS || arch.kernel != KERNEL || arch.pooling != "masked_mean"
    {
        return Err(Error::ShapeMismatch(format!(
            "unsupported architecture: {} channels, {}x{} kernels, {} pooling",
            arch.conv_channels, arch.kernel, arch.kernel, arch.pooling
        )));
    }

    let mut blocks = Blocks::filled(arch.input_channels, 0.0f32);
    for (name, block) in blocks.iter_mut() {
        let expected = expected_len(name, arch);
        let raw = cur.take(4 + 4 * expected, name)?;
        let stored = cur.u32(name)?;
        let computed = crc32fast::hash(raw);
        if computed != stored {
            return Err(Error::ChecksumMismatch {
                what: name.to_string(),
                stored,
                computed,
            });
        }
        let count = u32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]) as usize;
        if count != expected {
            return Err(Error::ShapeMismatch(format!(
                "{name}: {count} values stored, architecture needs {expected}"
            )));
        }
        for (v, c) in block.iter_mut().zip(raw[4..].chunks_exact(4)) {
            *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        }
    }
    if cur.pos != bytes.len() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after the last parameter block",
            bytes.len() - cur.pos
        )));
    }
    let params = ModelParams {
        input_channels: arch.input_channels,
        k_max: arch.k_max,
        blocks,
    };
    params.check_finite()?;
    Ok(Checkpoint { meta, params })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
