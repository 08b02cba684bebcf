//! Binary checkpoint layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "NALCKPT1"
//! header     u64 length + JSON (CheckpointHeader)
//! count      u64 number of parameter blocks
//! block      u32 name length, name (UTF-8), u8 kind, u32 ndim,
//!            ndim x u64 dims, prod(dims) x f64 values
//! ```
//!
//! A JSON sidecar next to the checkpoint (`<file>.json`) repeats the header
//! plus parameter shapes and free-form training provenance.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DualHeadModel, ModelConfig, ParamKind};
use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::io::{atomic_write, put_f64s, read, write_json, Reader};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NALCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    lora_active: bool,
    grl_lambda: Option<f64>,
    /// `[input_dim, n_voxels]`
    brain_head: Option<[usize; 2]>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParameterEntry {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: ModelConfig,
    pub lora_active: bool,
    pub grl_lambda: Option<f64>,
    pub brain_head: Option<[usize; 2]>,
    pub parameters: Vec<ParameterEntry>,
    pub provenance: serde_json::Value,
}

fn kind_code(kind: ParamKind) -> u8 {
    match kind {
        ParamKind::Base => 0,
        ParamKind::Adapter => 1,
        ParamKind::LmHead => 2,
        ParamKind::BrainHead => 3,
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_checkpoint(model: &DualHeadModel, path: &Path, provenance: serde_json::Value) -> Result<()> {
    let header = CheckpointHeader {
        config: model.config.clone(),
        lora_active: model.lora_active,
        grl_lambda: model.grl_lambda,
        brain_head: model.brain_head_dims().map(|(i, v)| [i, v]),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for p in &model.params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(kind_code(p.kind));
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        put_f64s(&mut out, p.value.data());
    }
    atomic_write(path, &out)?;
    let manifest = CheckpointManifest {
        config: header.config,
        lora_active: header.lora_active,
        grl_lambda: header.grl_lambda,
        brain_head: header.brain_head,
        parameters: model
            .params
            .iter()
            .map(|p| ParameterEntry {
                name: p.name.clone(),
                kind: p.kind,
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        provenance,
    };
    write_json(&sidecar_path(path), &manifest)
}

pub fn load_checkpoint(path: &Path) -> Result<DualHeadModel> {
    let bytes = read(path)?;
    let mut r = Reader::new(&bytes);
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format("magic", 0, "not a checkpoint file"));
    }
    let header_len = r.u64("header")? as usize;
    let header_offset = r.offset();
    let header: CheckpointHeader = serde_json::from_slice(r.take(header_len, "header")?)
        .map_err(|e| Error::format("header", header_offset, e.to_string()))?;
    header
        .config
        .validate()
        .map_err(|e| Error::format("header", header_offset, e.to_string()))?;

    // Structure is rebuilt from the header; every value is then overwritten.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = DualHeadModel::new(header.config.clone(), &mut rng)?;
    if header.lora_active {
        model.attach_lora(&mut rng);
    }
    if let Some([input_dim, n_voxels]) = header.brain_head {
        model.attach_brain_head(input_dim, n_voxels, &mut rng)?;
    }
    model.set_grl_lambda(header.grl_lambda)?;

    let count_offset = r.offset();
    let count = r.u64("parameter count")? as usize;
    if count != model.params.len() {
        return Err(Error::format(
            "parameter count",
            count_offset,
            format!("expected {} parameters, found {count}", model.params.len()),
        ));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let block_offset = r.offset();
        let name_len = r.u32("parameter name")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "parameter name")?)
            .map_err(|_| Error::format("parameter name", block_offset, "name is not UTF-8"))?
            .to_string();
        let section = format!("parameter {name}");
        let kind = r.u8(&section)?;
        let ndim = r.u32(&section)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64(&section)? as usize);
        }
        let index = model
            .params
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| Error::format(&section, block_offset, "unknown parameter"))?;
        let expected = &model.params[index];
        if expected.value.shape() != shape.as_slice() || kind_code(expected.kind) != kind {
            return Err(Error::format(
                &section,
                block_offset,
                format!("shape {shape:?} does not match expected {:?}", expected.value.shape()),
            ));
        }
        let n: usize = shape.iter().product();
        let data = r.f64s(n, &section)?;
        model.params[index].value = Tensor::new(shape, data)?;
        seen[index] = true;
    }
    if r.remaining() != 0 {
        return Err(Error::format("trailer", r.offset(), "unexpected bytes after last parameter"));
    }
    debug_assert!(seen.iter().all(|&s| s));
    Ok(model)
}
