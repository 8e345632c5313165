//! Checkpoint directories.
//!
//! ```text
//! <dir>/meta.json                 versioned metadata (see CheckpointMeta)
//! <dir>/tensors/<name>.bin        raw little-endian f64 parameter buffers
//! <dir>/optimizer/m/<name>.bin    first moments (when optimizer state is stored)
//! <dir>/optimizer/v/<name>.bin    second moments
//! ```
//!
//! Every buffer is listed in `meta.json` with its shape and SHA-256; loading
//! verifies both. Saving writes into a sibling temporary directory and then
//! renames it over the target.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::train::optim::{AdamW, AdamWConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<TensorEntry>,
    pub v: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub run_name: String,
    /// Run configuration as TOML text.
    pub run_config: String,
    pub model: ModelConfig,
    /// Completed steps of the run that wrote this checkpoint.
    pub step: usize,
    pub total_steps: usize,
    pub metrics: BTreeMap<String, f64>,
    pub tensors: Vec<TensorEntry>,
    pub optimizer: Option<OptimizerMeta>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub run_name: String,
    pub run_config: String,
    pub model: ModelConfig,
    pub step: usize,
    pub total_steps: usize,
    pub metrics: BTreeMap<String, f64>,
    pub params: ParamSet,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    pub fn is_complete(&self) -> bool {
        self.step >= self.total_steps
    }
}

fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_tensor(dir: &Path, name: &str, t: &Tensor) -> Result<TensorEntry> {
    let bytes = tensor_bytes(t);
    fs::write(dir.join(format!("{name}.bin")), &bytes)?;
    Ok(TensorEntry {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        sha256: digest(&bytes),
    })
}

fn read_tensor(dir: &Path, entry: &TensorEntry, root: &Path) -> Result<Tensor> {
    let path = dir.join(format!("{}.bin", entry.name));
    let bytes = fs::read(&path).map_err(|e| Error::Checkpoint {
        path: root.to_path_buf(),
        reason: format!("missing tensor `{}`: {e}", entry.name),
    })?;
    if digest(&bytes) != entry.sha256 {
        return Err(Error::HashMismatch { name: entry.name.clone() });
    }
    let numel: usize = entry.shape.iter().product();
    if bytes.len() != numel * 8 {
        return Err(Error::Checkpoint {
            path: root.to_path_buf(),
            reason: format!("tensor `{}` holds {} bytes, shape needs {}", entry.name, bytes.len(), numel * 8),
        });
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(entry.shape.clone(), data)
}

fn staging_dir(dir: &Path) -> PathBuf {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    dir.with_file_name(format!(".{name}.tmp"))
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    let tmp = staging_dir(dir);
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    let tdir = tmp.join("tensors");
    fs::create_dir_all(&tdir)?;
    let tensors = ckpt
        .params
        .iter()
        .map(|(_, name, t)| write_tensor(&tdir, name, t))
        .collect::<Result<Vec<_>>>()?;
    let optimizer = match &ckpt.optimizer {
        None => None,
        Some(opt) => {
            let (mdir, vdir) = (tmp.join("optimizer/m"), tmp.join("optimizer/v"));
            fs::create_dir_all(&mdir)?;
            fs::create_dir_all(&vdir)?;
            let names: Vec<&str> = ckpt.params.iter().map(|(_, n, _)| n).collect();
            if opt.m.len() != names.len() {
                return Err(Error::shape("save_checkpoint", &[opt.m.len()], &[names.len()]));
            }
            Some(OptimizerMeta {
                config: opt.config.clone(),
                step: opt.step,
                m: names.iter().zip(&opt.m).map(|(n, t)| write_tensor(&mdir, n, t)).collect::<Result<_>>()?,
                v: names.iter().zip(&opt.v).map(|(n, t)| write_tensor(&vdir, n, t)).collect::<Result<_>>()?,
            })
        }
    };
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_VERSION,
        run_name: ckpt.run_name.clone(),
        run_config: ckpt.run_config.clone(),
        model: ckpt.model.clone(),
        step: ckpt.step,
        total_steps: ckpt.total_steps,
        metrics: ckpt.metrics.clone(),
        tensors,
        optimizer,
    };
    let mut json = serde_json::to_string_pretty(&meta)?;
    json.push('\n');
    fs::write(tmp.join("meta.json"), json)?;
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::Checkpoint {
        path: dir.to_path_buf(),
        reason: format!("cannot read meta.json: {e}"),
    })?;
    let probe: serde_json::Value = serde_json::from_str(&text)?;
    let version = probe.get("format_version").and_then(|v| v.as_u64());
    if version != Some(CHECKPOINT_VERSION as u64) {
        return Err(Error::Checkpoint {
            path: dir.to_path_buf(),
            reason: format!("format version {version:?}, expected {CHECKPOINT_VERSION}"),
        });
    }
    let meta: CheckpointMeta = serde_json::from_value(probe)?;
    let tdir = dir.join("tensors");
    let mut params = ParamSet::new();
    for e in &meta.tensors {
        params.insert(e.name.clone(), read_tensor(&tdir, e, dir)?)?;
    }
    let optimizer = match &meta.optimizer {
        None => None,
        Some(om) => {
            let load = |sub: &str, entries: &[TensorEntry]| -> Result<Vec<Tensor>> {
                if entries.len() != meta.tensors.len() {
                    return Err(Error::Checkpoint {
                        path: dir.to_path_buf(),
                        reason: format!("optimizer {sub} lists {} buffers for {} tensors", entries.len(), meta.tensors.len()),
                    });
                }
                entries.iter().map(|e| read_tensor(&dir.join("optimizer").join(sub), e, dir)).collect()
            };
            Some(AdamW {
                config: om.config.clone(),
                step: om.step,
                m: load("m", &om.m)?,
                v: load("v", &om.v)?,
            })
        }
    };
    Ok(Checkpoint {
        run_name: meta.run_name,
        run_config: meta.run_config,
        model: meta.model,
        step: meta.step,
        total_steps: meta.total_steps,
        metrics: meta.metrics,
        params,
        optimizer,
    })
}
