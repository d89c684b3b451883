//! Single-file parameter checkpoints.
//!
//! Layout: the 8-byte magic `TGATCKP1`, a little-endian `u64` manifest length,
//! the JSON manifest, then every tensor's values as little-endian `f64`, in
//! manifest order. Batch-norm running statistics are stored as tensors named
//! `encoder.bn<k>.running_mean` / `.running_var`.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::numerics::{BatchNormState, Tensor};

const MAGIC: &[u8; 8] = b"TGATCKP1";

/// Provenance stored alongside the parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub fold: Option<usize>,
    pub best_epoch: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    config: ModelConfig,
    meta: CheckpointMeta,
    batch_norm_momentum: Vec<f64>,
    tensors: Vec<Entry>,
}

fn stat_names(k: usize) -> (String, String) {
    (format!("encoder.bn{k}.running_mean"), format!("encoder.bn{k}.running_var"))
}

pub fn save_checkpoint(path: &Path, params: &ModelParams, meta: &CheckpointMeta) -> Result<()> {
    params.check_shapes()?;
    let mut all: Vec<(String, Vec<usize>, &[f64])> = params
        .tensors
        .iter()
        .map(|(k, t)| (k.clone(), t.shape().to_vec(), t.data()))
        .collect();
    for (i, s) in params.batch_norm.iter().enumerate() {
        let (m, v) = stat_names(i + 1);
        all.push((m, vec![s.running_mean.len()], &s.running_mean));
        all.push((v, vec![s.running_var.len()], &s.running_var));
    }
    let manifest = Manifest {
        config: params.config.clone(),
        meta: meta.clone(),
        batch_norm_momentum: params.batch_norm.iter().map(|s| s.momentum).collect(),
        tensors: all.iter().map(|(n, s, _)| Entry { name: n.clone(), shape: s.clone() }).collect(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut bytes = Vec::with_capacity(16 + json.len() + all.iter().map(|a| a.2.len() * 8).sum::<usize>());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, _, data) in &all {
        for v in *data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint, validating every tensor against the shapes its stored
/// config implies.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16 + mlen)
        .ok_or_else(|| Error::format(path, "truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(body)
        .map_err(|e| Error::format(path, format!("invalid manifest: {e}")))?;
    let mut cursor = 16 + mlen;
    let mut tensors = IndexMap::new();
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let raw = bytes
            .get(cursor..cursor + 8 * n)
            .ok_or_else(|| Error::format(path, format!("data for `{}` is truncated", entry.name)))?;
        cursor += 8 * n;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        let t = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| Error::format(path, format!("`{}`: {e}", entry.name)))?;
        tensors.insert(entry.name.clone(), t);
    }
    if cursor != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes after the last tensor", bytes.len() - cursor)));
    }
    let mut batch_norm = Vec::new();
    for (i, &momentum) in manifest.batch_norm_momentum.iter().enumerate() {
        let (m, v) = stat_names(i + 1);
        let (Some(mean), Some(var)) = (tensors.shift_remove(&m), tensors.shift_remove(&v)) else {
            return Err(Error::format(path, format!("missing running statistics for batch norm {}", i + 1)));
        };
        batch_norm.push(BatchNormState {
            running_mean: mean.into_data(),
            running_var: var.into_data(),
            momentum,
        });
    }
    let params = ModelParams { config: manifest.config, tensors, batch_norm };
    params.config.validate()?;
    params.check_shapes()?;
    Ok((params, manifest.meta))
}

impl ModelParams {
    /// Checks that these parameters fit `config` (used when a run config is
    /// paired with a checkpoint trained elsewhere).
    pub fn check_compatible(&self, config: &ModelConfig) -> Result<()> {
        let probe = ModelParams {
            config: config.clone(),
            tensors: self.tensors.clone(),
            batch_norm: self.batch_norm.clone(),
        };
        probe.check_shapes()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut p = ModelParams::init(&ModelConfig::default(), 3).unwrap();
        p.batch_norm[1].running_mean[2] = 0.123456789;
        let meta = CheckpointMeta { seed: 3, fold: Some(1), best_epoch: Some(7) };
        save_checkpoint(&path, &p, &meta).unwrap();
        let (q, m) = load_checkpoint(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(meta, m);
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let p = ModelParams::init(&ModelConfig::default(), 3).unwrap();
        save_checkpoint(&path, &p, &CheckpointMeta::default()).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn incompatible_config_names_parameter() {
        let p = ModelParams::init(&ModelConfig::default(), 3).unwrap();
        let other = ModelConfig { gat2_dim: 8, ..Default::default() };
        let err = p.check_compatible(&other).unwrap_err().to_string();
        assert!(err.contains("gat2.w_l"), "{err}");
    }
}
