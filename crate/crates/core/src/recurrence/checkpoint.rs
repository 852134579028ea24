//! On-disk weights: `manifest.json` plus one little-endian f64 blob per
//! tensor under `tensors/`.
//!
//! Manifest schema (format version 1):
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "config": { ...ModelConfig... },
//!   "tensors": [
//!     { "name": "layers.0.key_proj.0", "shape": [64, 64], "dtype": "f64",
//!       "file": "tensors/layers.0.key_proj.0.bin" }
//!   ]
//! }
//! ```
//!
//! Tensor names: `embedding`, `final_norm`, `output_proj` (absent when
//! embeddings are tied) and per layer `i`: `layers.i.{key_proj,value_proj,
//! beta_proj}.j` for `j < n_h`, `layers.i.gate_proj` (gated models),
//! `layers.i.{query_proj,output_proj,readout_norm,mlp_norm,mlp_gate,mlp_up,
//! mlp_down}`, and with convolutions `layers.i.conv.query`,
//! `layers.i.conv.key.j`, `layers.i.conv.value.j`. Matrices are row-major.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, ModelWeights};
use crate::error::{ensure, Error, Result};
use crate::numerics::Matrix;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(dir: &Path, cfg: &ModelConfig, weights: &ModelWeights) -> Result<()> {
    weights.check_shapes(cfg)?;
    let tdir = dir.join("tensors");
    std::fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
    let mut tensors = vec![];
    for (name, m) in weights.fields() {
        let file = format!("tensors/{name}.bin");
        let path = dir.join(&file);
        let bytes: Vec<u8> = m.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        tensors.push(TensorEntry {
            name,
            shape: [m.rows(), m.cols()],
            dtype: "f64".into(),
            file,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: cfg.clone(),
        tensors,
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<(ModelConfig, ModelWeights)> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    ensure!(
        manifest.format_version == FORMAT_VERSION,
        "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
        manifest.format_version
    );
    let cfg = manifest.config;
    cfg.validate()?;
    let entries: HashMap<&str, &TensorEntry> = manifest.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let shapes = ModelWeights::shapes(&cfg);
    ensure!(
        entries.len() == shapes.fields().len() && entries.len() == manifest.tensors.len(),
        "manifest lists {} tensors, config implies {}",
        manifest.tensors.len(),
        shapes.fields().len()
    );
    let weights = shapes.try_map(|name, &(r, c)| {
        let e = entries
            .get(name)
            .ok_or_else(|| Error::Contract(format!("checkpoint is missing tensor {name}")))?;
        ensure!(e.dtype == "f64", "tensor {name} has dtype {}, expected f64", e.dtype);
        ensure!(e.shape == [r, c], "tensor {name} has shape {:?}, expected [{r}, {c}]", e.shape);
        let p = dir.join(&e.file);
        let bytes = std::fs::read(&p).map_err(|err| Error::io(&p, err))?;
        ensure!(bytes.len() == r * c * 8, "tensor {name}: {} bytes for {r}x{c} f64", bytes.len());
        let data = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8 bytes")))
            .collect();
        Matrix::from_vec(r, c, data)
    })?;
    Ok((cfg, weights))
}
