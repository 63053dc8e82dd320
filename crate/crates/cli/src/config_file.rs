//! Model configuration files and their digests.
//!
//! A config file is a TOML document mirroring `ModelConfig` field for
//! field; unknown or missing keys are errors. The digest is the SHA-256 of
//! the canonical text, which is the config re-serialized by this module,
//! so formatting and comments in the source file do not matter.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use convformer_core::backbone::{Ablation, ModelConfig};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown preset {0:?}; expected one of convformer-s, convformer-l, tiny or file:<path>")]
    UnknownPreset(String),
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config {origin}: {detail}")]
    Parse { origin: String, detail: String },
}

pub const PRESETS: [&str; 3] = ["convformer-s", "convformer-l", "tiny"];

/// Where a model configuration comes from, as given to `--model`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelSource {
    Preset(String),
    File(PathBuf),
}

impl FromStr for ModelSource {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        match s.strip_prefix("file:") {
            Some(path) => Ok(ModelSource::File(PathBuf::from(path))),
            None if PRESETS.contains(&s) => Ok(ModelSource::Preset(s.to_string())),
            None => Err(ConfigError::UnknownPreset(s.to_string())),
        }
    }
}

impl fmt::Display for ModelSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelSource::Preset(name) => f.write_str(name),
            ModelSource::File(path) => write!(f, "file:{}", path.display()),
        }
    }
}

impl ModelSource {
    /// Loads the configuration, applying `ablation` on top.
    pub fn resolve(&self, ablation: Option<Ablation>) -> Result<ModelConfig, ConfigError> {
        let config = match self {
            ModelSource::Preset(name) => {
                ModelConfig::preset(name).ok_or_else(|| ConfigError::UnknownPreset(name.clone()))?
            }
            ModelSource::File(path) => load(path)?,
        };
        Ok(match ablation {
            Some(a) => config.with_ablation(a),
            None => config,
        })
    }
}

pub fn parse(text: &str, origin: &str) -> Result<ModelConfig, ConfigError> {
    let parse_error = |detail: String| ConfigError::Parse { origin: origin.to_string(), detail };
    let config: ModelConfig = toml::from_str(text).map_err(|e| parse_error(e.to_string()))?;
    config.validate().map_err(|e| parse_error(e.to_string()))?;
    Ok(config)
}

pub fn load(path: &Path) -> Result<ModelConfig, ConfigError> {
    let text =
        std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
    parse(&text, &path.display().to_string())
}

pub fn canonical_text(config: &ModelConfig) -> String {
    toml::to_string(config).expect("model configs always serialize")
}

pub fn digest(config: &ModelConfig) -> [u8; 32] {
    Sha256::digest(canonical_text(config).as_bytes()).into()
}

pub fn digest_hex(config: &ModelConfig) -> String {
    hex::encode(digest(config))
}
