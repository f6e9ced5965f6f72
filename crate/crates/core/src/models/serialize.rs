//! The `LDNM` model file format.
//!
//! ```text
//! magic "LDNM" | u32 version=1
//! | u16 tag_len | arch tag | u32 cfg_len | canonical config text
//! | u32 tensor_count
//! per tensor: u16 name_len | name | u8 rank | rank u32 extents | f64 LE data
//! ```
//!
//! Tensors include batch-norm running statistics, so a round trip restores
//! eval-mode behavior bit-exactly.

use std::fs;
use std::path::Path;

use crate::diffcore::{NamedTensors, Tensor};
use crate::error::{Error, Result};

use super::config::ModelConfig;
use super::zoo::Model;

const MAGIC: &[u8; 4] = b"LDNM";
const VERSION: u32 = 1;

/// Serialize the model; returns the file size in bytes.
pub fn serialize_model(model: &Model, path: &Path) -> Result<u64> {
    let bytes = model_to_bytes(model)?;
    fs::write(path, &bytes)?;
    Ok(bytes.len() as u64)
}

pub fn model_to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let tag = model.config.arch_tag().as_bytes();
    buf.extend_from_slice(&(tag.len() as u16).to_le_bytes());
    buf.extend_from_slice(tag);
    let cfg = model.config.to_text();
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg.as_bytes());

    let tensors = model.graph.dump_state();
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in &tensors {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::input(format!("tensor name too long: '{name}'")));
        }
        buf.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.push(tensor.rank() as u8);
        for &e in tensor.shape() {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn deserialize_model(path: &Path) -> Result<Model> {
    let bytes = fs::read(path)?;
    model_from_bytes(&bytes)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::format(format!(
                "truncated model file at offset {} (wanted {n} bytes)",
                *pos
            )));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    if take(&mut pos, 4)? != MAGIC {
        return Err(Error::format("bad magic: expected LDNM"));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported model version {version} (expected {VERSION})"
        )));
    }
    let tag_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
    let tag = std::str::from_utf8(take(&mut pos, tag_len)?)
        .map_err(|_| Error::format("invalid arch tag"))?
        .to_string();
    let cfg_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let cfg_text = std::str::from_utf8(take(&mut pos, cfg_len)?)
        .map_err(|_| Error::format("invalid config text"))?;
    let config =
        ModelConfig::from_text(cfg_text, None).map_err(|e| Error::format(e.to_string()))?;
    if config.arch_tag() != tag {
        return Err(Error::format(format!(
            "arch tag '{tag}' does not match config '{}'",
            config.arch_tag()
        )));
    }

    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut tensors = NamedTensors::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| Error::format("invalid tensor name"))?
            .to_string();
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = take(&mut pos, n * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| Error::format(e.to_string()))?;
        if tensors.insert(name.clone(), tensor).is_some() {
            return Err(Error::format(format!("duplicate tensor '{name}'")));
        }
    }
    if pos != bytes.len() {
        return Err(Error::format(format!(
            "{} trailing bytes in model file",
            bytes.len() - pos
        )));
    }

    let mut model = Model::init(&config, 0).map_err(|e| Error::format(e.to_string()))?;
    model.graph.load_state(tensors)?;
    Ok(model)
}
