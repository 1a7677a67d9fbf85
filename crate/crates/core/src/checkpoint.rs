//! Checkpoint container.
//!
//! Layout: the 8-byte magic `DDNETCKP`, a little-endian `u32` header length,
//! a JSON header (format version, model config, seed, counters and a tensor
//! table), then every tensor as little-endian `f32` in table order. Values
//! round-trip bitwise.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::AdamState;

const MAGIC: &[u8; 8] = b"DDNETCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    seed: u64,
    step: u64,
    epoch: usize,
    /// Adam update count; present when moments follow the parameters.
    adam_t: Option<u64>,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub step: u64,
    /// Number of completed epochs.
    pub epoch: usize,
    pub optimizer: Option<AdamState>,
}

fn moment_names<'a>(prefix: &str, model: &'a Model) -> impl Iterator<Item = TensorEntry> + 'a {
    let prefix = prefix.to_string();
    model.params().iter().map(move |p| TensorEntry {
        name: format!("{prefix}/{}", p.name),
        shape: p.shape.clone(),
    })
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let model = &ckpt.model;
    let mut tensors: Vec<TensorEntry> = model
        .params()
        .iter()
        .map(|p| TensorEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
        })
        .collect();
    if ckpt.optimizer.is_some() {
        tensors.extend(moment_names("adam.m", model));
        tensors.extend(moment_names("adam.v", model));
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        seed: model.seed(),
        step: ckpt.step,
        epoch: ckpt.epoch,
        adam_t: ckpt.optimizer.as_ref().map(|o| o.t),
        tensors,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + header.len() + 4 * 3 * model.params().scalar_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    let mut put = |values: &[f32]| values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    model.params().iter().for_each(|p| put(&p.data));
    if let Some(opt) = &ckpt.optimizer {
        opt.m.iter().for_each(|m| put(m));
        opt.v.iter().for_each(|v| put(v));
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |msg: &str| Error::checkpoint(path, msg.to_string());
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let header_bytes = bytes.get(12..12 + header_len).ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(header_bytes).map_err(|e| Error::checkpoint(path, format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::checkpoint(
            path,
            format!("unsupported format version {}", header.format_version),
        ));
    }
    let mut model = Model::uninitialized(&header.config, header.seed)
        .map_err(|e| Error::checkpoint(path, format!("invalid model config: {e}")))?;
    let expected_params = model.params().len();
    let has_moments = header.adam_t.is_some();
    let expected = expected_params * if has_moments { 3 } else { 1 };
    if header.tensors.len() != expected {
        return Err(Error::checkpoint(
            path,
            format!("expected {expected} tensors, found {}", header.tensors.len()),
        ));
    }
    let mut cursor = 12 + header_len;
    let mut read = |entry: &TensorEntry, shape: &[usize]| -> Result<Vec<f32>> {
        if entry.shape != shape {
            return Err(Error::checkpoint(
                path,
                format!("tensor {} has shape {:?}, expected {:?}", entry.name, entry.shape, shape),
            ));
        }
        let n: usize = shape.iter().product();
        let raw = bytes
            .get(cursor..cursor + 4 * n)
            .ok_or_else(|| Error::checkpoint(path, format!("truncated data for {}", entry.name)))?;
        cursor += 4 * n;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    };

    let shapes: Vec<(String, Vec<usize>)> = model.params().iter().map(|p| (p.name.clone(), p.shape.clone())).collect();
    for ((name, shape), (entry, param)) in shapes.iter().zip(header.tensors.iter().zip(model.params_mut().iter_mut())) {
        if &entry.name != name {
            return Err(Error::checkpoint(path, format!("expected tensor {name}, found {}", entry.name)));
        }
        param.data = read(entry, shape)?;
    }
    let optimizer = match header.adam_t {
        Some(t) => {
            let mut moments = Vec::with_capacity(2 * expected_params);
            for (i, entry) in header.tensors[expected_params..].iter().enumerate() {
                moments.push(read(entry, &shapes[i % expected_params].1)?);
            }
            let v = moments.split_off(expected_params);
            Some(AdamState { m: moments, v, t })
        }
        None => None,
    };
    if cursor != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok(Checkpoint {
        model,
        step: header.step,
        epoch: header.epoch,
        optimizer,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(&encode_checkpoint(ckpt)).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::checkpoint(path, e.to_string()))?;
    decode_checkpoint(&bytes, path)
}
