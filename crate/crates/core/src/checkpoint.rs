//! Checkpoint directories: `manifest.toml` plus `params.bin`.
//!
//! The manifest records the network and level configuration, training
//! progress and, per parameter, its name, shape, byte offset and element
//! count. `params.bin` holds every parameter as little-endian `f32`, in
//! manifest order.

use std::path::{Path, PathBuf};

use gradcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::falnet::{FalNet, NetworkConfig, Param};
use crate::quantize::LevelConfig;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const PARAMS_FILE: &str = "params.bin";
const DTYPE: &str = "f32-le";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingState {
    pub seed: u64,
    /// 0 for untrained weights, otherwise the training step that produced them.
    pub train_step: u8,
    pub epoch: u64,
    pub iteration: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    dtype: String,
    training: TrainingState,
    network: NetworkConfig,
    levels: LevelConfig,
    params: Vec<ParamEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: FalNet<f32>,
    pub levels: LevelConfig,
    pub training: TrainingState,
}

fn ck_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn save_checkpoint(ck: &Checkpoint, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut blob = Vec::with_capacity(ck.model.param_count() * 4);
    let mut params = Vec::with_capacity(ck.model.params().len());
    for p in ck.model.params() {
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: blob.len() as u64,
            len: p.value.numel() as u64,
        });
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: DTYPE.to_string(),
        training: ck.training.clone(),
        network: ck.model.config().clone(),
        levels: ck.levels.clone(),
        params,
    };
    let text = toml::to_string(&manifest).map_err(|e| ck_err(dir, e.to_string()))?;
    let mpath = dir.join(MANIFEST_FILE);
    std::fs::write(&mpath, text).map_err(io_err(&mpath))?;
    let bpath = dir.join(PARAMS_FILE);
    std::fs::write(&bpath, blob).map_err(io_err(&bpath))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mpath: PathBuf = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| ck_err(&mpath, e.message().to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(ck_err(
            &mpath,
            format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                manifest.format_version
            ),
        ));
    }
    if manifest.dtype != DTYPE {
        return Err(ck_err(
            &mpath,
            format!("unsupported dtype `{}` (expected {DTYPE})", manifest.dtype),
        ));
    }
    if manifest.network.levels != manifest.levels.count {
        return Err(ck_err(
            &mpath,
            format!(
                "network has {} output levels but the level config has {}",
                manifest.network.levels, manifest.levels.count
            ),
        ));
    }
    let bpath = dir.join(PARAMS_FILE);
    let blob = std::fs::read(&bpath).map_err(io_err(&bpath))?;
    let expected: u64 = manifest.params.iter().map(|p| p.len * 4).sum();
    if blob.len() as u64 != expected {
        return Err(ck_err(
            &bpath,
            format!(
                "parameter blob is {} bytes, manifest expects {expected}",
                blob.len()
            ),
        ));
    }
    let mut values = Vec::with_capacity(manifest.params.len());
    let mut cursor = 0u64;
    for p in &manifest.params {
        let numel: usize = p.shape.iter().product();
        if numel as u64 != p.len {
            return Err(ck_err(
                &mpath,
                format!(
                    "parameter `{}`: shape {:?} has {numel} elements but len is {}",
                    p.name, p.shape, p.len
                ),
            ));
        }
        if p.offset != cursor {
            return Err(ck_err(
                &mpath,
                format!(
                    "parameter `{}`: byte offset {} but the previous parameter ends at {cursor}",
                    p.name, p.offset
                ),
            ));
        }
        let start = p.offset as usize;
        let bytes = &blob[start..start + numel * 4];
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        values.push(Param {
            name: p.name.clone(),
            value: Tensor::new(p.shape.clone(), data)?,
        });
        cursor += p.len * 4;
    }
    let model =
        FalNet::with_params(manifest.network, values).map_err(|e| ck_err(&mpath, e.to_string()))?;
    Ok(Checkpoint {
        model,
        levels: manifest.levels,
        training: manifest.training,
    })
}
