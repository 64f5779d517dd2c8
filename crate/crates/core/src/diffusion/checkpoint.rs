//! Single-file checkpoint archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "GVCKPT01"
//! manifest_len u64
//! manifest     manifest_len bytes of UTF-8 JSON (see `Manifest`)
//! data         concatenated raw tensor values, in manifest order
//! ```
//!
//! Each manifest entry gives the tensor's name, shape, dtype (`f32` or
//! `f64`), byte offset into the data section and byte length. Entries are
//! sorted by name, so a given model state always serializes to the same bytes.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::model::{GestureVideoModel, ModelConfig};
use crate::diffusion::schedule::ScheduleDescriptor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GVCKPT01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub len: u64,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub config_hash: String,
    pub schedule: ScheduleDescriptor,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
}

pub struct LoadedCheckpoint {
    pub model: GestureVideoModel,
    pub manifest: Manifest,
}

fn dtype_name(d: DType) -> Result<&'static str> {
    match d {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::invalid(format!("unsupported checkpoint dtype {other:?}"))),
    }
}

/// Serializes the model's parameters. Returns the archive bytes.
pub fn encode(model: &GestureVideoModel, schedule: ScheduleDescriptor, step: u64) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(model.params().len());
    let mut data = Vec::new();
    for (name, p) in model.params().iter() {
        let t = &p.tensor;
        let dtype = dtype_name(t.dtype())?;
        let start = data.len() as u64;
        let flat = t.flatten_all()?;
        match t.dtype() {
            DType::F32 => flat.to_vec1::<f32>()?.iter().for_each(|v| data.extend_from_slice(&v.to_le_bytes())),
            _ => flat.to_vec1::<f64>()?.iter().for_each(|v| data.extend_from_slice(&v.to_le_bytes())),
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.dims().to_vec(),
            dtype: dtype.to_string(),
            offset: start,
            len: data.len() as u64 - start,
            trainable: p.trainable,
        });
    }
    let cfg = model.config().clone();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config_hash: cfg.hash(),
        model_config: cfg,
        schedule,
        step,
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::invalid(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    Ok(out)
}

/// Writes atomically: the archive goes to a temporary sibling first and is
/// renamed over `path`, so an interrupted write never clobbers an earlier
/// checkpoint.
pub fn save(path: &Path, model: &GestureVideoModel, schedule: ScheduleDescriptor, step: u64) -> Result<()> {
    let bytes = encode(model, schedule, step)?;
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn ckpt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn read_manifest(bytes: &[u8], path: &Path) -> Result<(Manifest, usize)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(ckpt_err(path, "not a checkpoint archive (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|e| *e <= bytes.len())
        .ok_or_else(|| ckpt_err(path, "truncated manifest"))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[16..end]).map_err(|e| ckpt_err(path, format!("bad manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(ckpt_err(path, format!("unsupported format version {}", manifest.format_version)));
    }
    if manifest.config_hash != manifest.model_config.hash() {
        return Err(ckpt_err(path, "config hash does not match the stored config"));
    }
    Ok((manifest, end))
}

/// Loads a checkpoint, converting parameters to `dtype`.
pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<LoadedCheckpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (manifest, start) = read_manifest(&bytes, path)?;
    let data = &bytes[start..];
    let mut tensors = HashMap::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let (a, b) = (e.offset as usize, (e.offset + e.len) as usize);
        if b > data.len() || a > b {
            return Err(ckpt_err(path, format!("tensor `{}` lies outside the data section", e.name)));
        }
        let raw = &data[a..b];
        let n: usize = e.shape.iter().product();
        let t = match e.dtype.as_str() {
            "f32" if raw.len() == 4 * n => {
                let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, e.shape.as_slice(), device)?
            }
            "f64" if raw.len() == 8 * n => {
                let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, e.shape.as_slice(), device)?
            }
            other => {
                return Err(ckpt_err(
                    path,
                    format!("tensor `{}`: {} bytes of {other} for shape {:?}", e.name, raw.len(), e.shape),
                ))
            }
        };
        tensors.insert(e.name.clone(), t);
    }
    let model = GestureVideoModel::from_tensors(&manifest.model_config, tensors, dtype, device)
        .map_err(|e| ckpt_err(path, e.to_string()))?;
    Ok(LoadedCheckpoint { model, manifest })
}

/// SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
