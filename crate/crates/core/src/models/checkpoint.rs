//! Model checkpoints: `manifest.json` (spec echo, parameter shapes, seed)
//! plus `params.bin` holding little-endian f32 values in manifest order,
//! batchnorm running buffers appended after the parameters.

use super::{FusionNetwork, ModelSpec};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const CHECKPOINT_VERSION: &str = "lczlab-checkpoint/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: String,
    pub spec: ModelSpec,
    pub seed: u64,
    pub params: Vec<ParamEntry>,
    pub bn_buffers: Vec<BnEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BnEntry {
    pub name: String,
    pub channels: usize,
}

pub fn save_checkpoint(net: &FusionNetwork<f32>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION.to_string(),
        spec: net.spec.clone(),
        seed: net.seed,
        params: net
            .params()
            .iter()
            .zip(net.param_names())
            .map(|(p, n)| ParamEntry {
                name: n.clone(),
                shape: p.tensor.shape.clone(),
            })
            .collect(),
        bn_buffers: net
            .bn_states()
            .iter()
            .zip(net.bn_names())
            .map(|(s, n)| BnEntry {
                name: n.clone(),
                channels: s.running_mean.len(),
            })
            .collect(),
    };
    let mut bin = Vec::new();
    for p in net.params() {
        for &v in &p.tensor.data {
            bin.extend_from_slice(&v.to_le_bytes());
        }
    }
    for s in net.bn_states() {
        for &v in s.running_mean.iter().chain(&s.running_var) {
            bin.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    fs::write(dir.join("params.bin"), bin)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<FusionNetwork<f32>> {
    let manifest: CheckpointManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {:?}",
            manifest.version
        )));
    }
    let mut net = FusionNetwork::<f32>::build(manifest.spec.clone(), manifest.seed)?;
    let bin = fs::read(dir.join("params.bin"))?;
    let expected: usize = net.params().iter().map(|p| p.tensor.numel()).sum::<usize>()
        + net
            .bn_states()
            .iter()
            .map(|s| 2 * s.running_mean.len())
            .sum::<usize>();
    if bin.len() != expected * 4 {
        return Err(Error::Format(format!(
            "params.bin holds {} bytes, expected {}",
            bin.len(),
            expected * 4
        )));
    }
    for (entry, (p, name)) in manifest
        .params
        .iter()
        .zip(net.params().iter().zip(net.param_names()))
    {
        if &entry.name != name || entry.shape != p.tensor.shape {
            return Err(Error::Format(format!(
                "checkpoint parameter {:?} {:?} does not match rebuilt {:?} {:?}",
                entry.name, entry.shape, name, p.tensor.shape
            )));
        }
    }
    let mut values = bin
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    for p in net.params_mut() {
        for v in &mut p.tensor.data {
            *v = values.next().expect("length checked");
        }
    }
    for s in net.bn_states_mut() {
        for v in s.running_mean.iter_mut().chain(s.running_var.iter_mut()) {
            *v = values.next().expect("length checked");
        }
    }
    Ok(net)
}
