//! Checkpoint format: a small self-describing container holding the model
//! architecture, mode, adapter setup, and every parameter tensor.
//!
//! Layout on disk:
//!
//! ```text
//! magic "LSGCKPT1" | u64 LE manifest byte length | manifest JSON | raw data
//! ```
//!
//! The manifest records name, shape, precision, byte offset, and
//! trainability for each tensor; the data region is the little-endian
//! concatenation of all tensors in manifest order. Save → load round
//! trips are bit-exact.

use super::{Mode, Model, ModelConfig, ModelError, Result};
use crate::lora::LoraConfig;
use crate::numerics::{Precision, Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"LSGCKPT1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the data region.
    offset: u64,
    /// Number of scalar elements.
    len: u64,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    mode: Mode,
    config: ModelConfig,
    lora: Option<LoraConfig>,
    merged: bool,
    precision: Precision,
    params: Vec<ParamEntry>,
}

fn io_err(e: std::io::Error) -> ModelError {
    ModelError::BadConfig(format!("checkpoint io: {e}"))
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::BadConfig(format!("checkpoint: {}", msg.into()))
}

/// Serializes the model to `path`.
pub fn save<S: Scalar>(model: &Model<S>, path: &Path) -> Result<()> {
    let width = S::PRECISION.byte_width() as u64;
    let mut params = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    model.for_each_param(|name, t| {
        params.push(ParamEntry {
            name: name.to_owned(),
            shape: t.shape().to_vec(),
            offset: data.len() as u64,
            len: t.numel() as u64,
            trainable: t.requires_grad(),
        });
        for &v in t.data() {
            v.write_le(&mut data);
        }
    });
    debug_assert!(params
        .iter()
        .all(|p| p.offset % width == 0 && p.len * width <= data.len() as u64));

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        mode: model.mode(),
        config: model.cfg.clone(),
        lora: model.lora_cfg.clone(),
        merged: model.merged,
        precision: S::PRECISION,
        params,
    };
    let manifest_bytes =
        serde_json::to_vec(&manifest).map_err(|e| corrupt(format!("manifest encode: {e}")))?;

    let mut f = std::fs::File::create(path).map_err(io_err)?;
    f.write_all(MAGIC).map_err(io_err)?;
    f.write_all(&(manifest_bytes.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    f.write_all(&manifest_bytes).map_err(io_err)?;
    f.write_all(&data).map_err(io_err)?;
    Ok(())
}

/// Reads only the manifest — cheap way to inspect mode/config of a file.
pub fn peek_mode(path: &Path) -> Result<(Mode, ModelConfig)> {
    let manifest = read_manifest(&std::fs::read(path).map_err(io_err)?)?.0;
    Ok((manifest.mode, manifest.config))
}

fn read_manifest(bytes: &[u8]) -> Result<(Manifest, usize)> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let m_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let data_start = 16 + m_len;
    if bytes.len() < data_start {
        return Err(corrupt("truncated manifest"));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..data_start])
        .map_err(|e| corrupt(format!("manifest decode: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(corrupt(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    Ok((manifest, data_start))
}

/// Deserializes a model saved with [`save`]. The scalar type must match the
/// stored precision; the stored parameter set must exactly match the
/// reconstructed architecture (no missing or extra tensors).
pub fn load<S: Scalar>(path: &Path) -> Result<Model<S>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(io_err)?
        .read_to_end(&mut bytes)
        .map_err(io_err)?;
    let (manifest, data_start) = read_manifest(&bytes)?;
    if manifest.precision != S::PRECISION {
        return Err(corrupt(format!(
            "precision mismatch: file holds {:?}, requested {:?}",
            manifest.precision,
            S::PRECISION
        )));
    }
    let data = &bytes[data_start..];
    let width = S::PRECISION.byte_width();

    // Rebuild the skeleton, then overwrite every tensor from the file.
    let mut model = Model::<S>::new(manifest.config.clone(), 0)?;
    if manifest.mode == Mode::Cls {
        model.add_classifier_head(0);
    }
    if let Some(lora) = &manifest.lora {
        if !manifest.merged {
            model.attach_lora(lora, 0)?;
        } else {
            model.lora_cfg = Some(lora.clone());
        }
    }
    model.merged = manifest.merged;

    let mut by_name: std::collections::BTreeMap<&str, &ParamEntry> =
        manifest.params.iter().map(|p| (p.name.as_str(), p)).collect();
    let mut failure: Option<ModelError> = None;
    model.for_each_param_mut(|name, t| {
        if failure.is_some() {
            return;
        }
        let Some(entry) = by_name.remove(name) else {
            failure = Some(corrupt(format!("file is missing tensor '{name}'")));
            return;
        };
        if entry.shape != t.shape() {
            failure = Some(corrupt(format!(
                "tensor '{name}' has shape {:?}, expected {:?}",
                entry.shape,
                t.shape()
            )));
            return;
        }
        let start = entry.offset as usize;
        let end = start + entry.len as usize * width;
        if end > data.len() || entry.len as usize != t.numel() {
            failure = Some(corrupt(format!("tensor '{name}' data out of range")));
            return;
        }
        let mut fresh = Vec::with_capacity(t.numel());
        for i in 0..t.numel() {
            fresh.push(S::read_le(&data[start + i * width..]));
        }
        let mut rebuilt = Tensor::new(entry.shape.clone(), fresh).expect("shape checked");
        rebuilt.set_requires_grad(entry.trainable);
        *t = rebuilt;
    });
    if let Some(err) = failure {
        return Err(err);
    }
    if let Some((name, _)) = by_name.into_iter().next() {
        return Err(corrupt(format!("file holds unknown tensor '{name}'")));
    }
    Ok(model)
}
