//! The run configuration: one JSON document covering every stage.

use std::path::{Path, PathBuf};

use eeg_tgat::dsp::PreprocessConfig;
use eeg_tgat::model::{Ablation, ModelConfig};
use eeg_tgat::synth::SynthConfig;
use eeg_tgat::train::TrainConfig;
use eeg_tgat::Error;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const SEED_ENV: &str = "TGAT_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Dataset directory, segment archive or checkpoint, depending on the
    /// command.
    pub input: Option<PathBuf>,
    /// Base directory that run directories are created in.
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { input: None, output: PathBuf::from("runs") }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ablation: Ablation,
    pub paths: Paths,
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), swaps in a synth preset, applies
    /// a `TGAT_SEED` environment override to both seeds, then the `--set`
    /// overrides.
    pub fn resolve(path: Option<&Path>, preset: Option<SynthConfig>, sets: &[String]) -> Result<Self, Error> {
        let mut base = match path {
            Some(p) => {
                let text =
                    std::fs::read_to_string(p).map_err(|source| Error::Io { path: p.to_path_buf(), source })?;
                serde_json::from_str::<RunConfig>(&text)
                    .map_err(|e| config_error(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(p) = preset {
            base.synth = SynthConfig { seed: base.synth.seed, ..p };
        }
        let mut value = serde_json::to_value(&base).expect("config serializes");
        if let Ok(seed) = std::env::var(SEED_ENV) {
            let seed: u64 = seed
                .trim()
                .parse()
                .map_err(|_| config_error(format!("{SEED_ENV}={seed:?} is not an unsigned integer")))?;
            value["synth"]["seed"] = seed.into();
            value["train"]["seed"] = seed.into();
        }
        for set in sets {
            apply_override(&mut value, set)?;
        }
        serde_json::from_value(value).map_err(|e| config_error(e.to_string()))
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// First 12 hex digits of the SHA-256 of the echoed config.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_pretty_json().as_bytes()))[..12].to_string()
    }

    /// Model configuration with the ablation switch applied.
    pub fn effective_model(&self) -> ModelConfig {
        self.ablation.apply(&self.model)
    }
}

/// Applies one `dotted.path=value` override. The value is parsed as JSON and
/// falls back to a plain string.
pub fn apply_override(root: &mut Value, set: &str) -> Result<(), Error> {
    let (key, raw) = set.split_once('=').ok_or_else(|| config_error(format!("override `{set}` is not key=value")))?;
    let new: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = root;
    for part in key.split('.') {
        slot = match slot {
            Value::Object(map) => map.get_mut(part),
            Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| config_error(format!("unknown config key `{key}`")))?;
    }
    *slot = new;
    Ok(())
}
