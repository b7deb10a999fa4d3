//! Checkpoint persistence: every named tensor of a parameter store in one
//! binary blob (names, trainable flags, shapes, 64-bit payloads), plus a
//! JSON sidecar carrying the caller's config so a checkpoint is loadable
//! without outside knowledge. Payloads stay 64-bit so training resumes
//! bit-exactly.

use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Serialize};
use thiserror::Error;

use vidsgg_core::autodiff::Tensor;
use vidsgg_core::nn::ParamStore;

const MAGIC: &[u8; 8] = b"VSGGCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: invalid JSON sidecar: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {message}")]
    Corrupt { path: PathBuf, message: String },
}

impl CheckpointError {
    fn corrupt(path: &Path, message: impl Into<String>) -> Self {
        CheckpointError::Corrupt { path: path.to_path_buf(), message: message.into() }
    }
}

/// Sidecar path convention: the checkpoint path plus a `.json` suffix.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Writes the store and the serialized config.
pub fn save_checkpoint<C: Serialize>(
    path: &Path,
    store: &ParamStore,
    config: &C,
) -> Result<(), CheckpointError> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    push_u32(&mut bytes, VERSION);
    push_u32(&mut bytes, store.len() as u32);
    for (name, entry) in store.iter() {
        push_u32(&mut bytes, name.len() as u32);
        bytes.extend_from_slice(name.as_bytes());
        bytes.push(entry.trainable as u8);
        push_u32(&mut bytes, entry.tensor.shape().len() as u32);
        for &d in entry.tensor.shape() {
            push_u32(&mut bytes, d as u32);
        }
        for &v in entry.tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes)
        .map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;

    let sidecar = sidecar_path(path);
    let mut text = serde_json::to_string_pretty(config)
        .map_err(|source| CheckpointError::Json { path: sidecar.clone(), source })?;
    text.push('\n');
    std::fs::write(&sidecar, text)
        .map_err(|source| CheckpointError::Io { path: sidecar, source })
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.at + n > self.bytes.len() {
            return Err(CheckpointError::corrupt(self.path, "truncated checkpoint"));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Reads a checkpoint and its config sidecar back.
pub fn load_checkpoint<C: DeserializeOwned>(
    path: &Path,
) -> Result<(ParamStore, C), CheckpointError> {
    let bytes = std::fs::read(path)
        .map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    let mut r = Reader { path, bytes: &bytes, at: 0 };
    if r.take(8)? != MAGIC {
        return Err(CheckpointError::corrupt(path, "not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::corrupt(path, format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::corrupt(path, "tensor name is not UTF-8"))?
            .to_string();
        let trainable = r.take(1)?[0] != 0;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for chunk in r.take(8 * n)?.chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().expect("8-byte chunk")));
        }
        let tensor = Tensor::new(shape, data);
        if trainable {
            store.insert(name, tensor);
        } else {
            store.insert_buffer(name, tensor);
        }
    }
    if r.at != bytes.len() {
        return Err(CheckpointError::corrupt(path, "trailing bytes after last tensor"));
    }

    let sidecar = sidecar_path(path);
    let text = std::fs::read_to_string(&sidecar)
        .map_err(|source| CheckpointError::Io { path: sidecar.clone(), source })?;
    let config = serde_json::from_str(&text)
        .map_err(|source| CheckpointError::Json { path: sidecar, source })?;
    Ok((store, config))
}
