//! Run configuration files (TOML). Every field has a default; unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use maskmamba_core::backbone::ModelConfig;
use maskmamba_core::decode::DecodeConfig;
use maskmamba_core::mim::TrainConfig;
use maskmamba_core::Precision;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const PRECISION_ENV: &str = "MASKMAMBA_PRECISION";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Falls back to `MASKMAMBA_PRECISION`, then f32.
    pub precision: Option<Precision>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// `path<TAB>label` index; image paths are relative to it.
    pub index: Option<PathBuf>,
    /// Codebook file; required with `index`.
    pub codebook: Option<PathBuf>,
    /// Precomputed caption embeddings; the hash embedder is used otherwise.
    pub text_embeddings: Option<PathBuf>,
    /// Random token grids instead of image files.
    pub synthetic: Option<SyntheticData>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticData {
    pub images: usize,
    pub seed: u64,
    /// Patch size and channel count of the random codebook used to render
    /// generated grids.
    pub patch: usize,
    pub channels: usize,
}

impl Default for SyntheticData {
    fn default() -> Self {
        Self { images: 8, seed: 1, patch: 4, channels: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Steps between console log lines.
    pub log_every: u64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { checkpoint_every: 500, log_every: 50 }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            e => e,
        })?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Makes data paths relative to the config file absolute.
    pub fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.data.index, &mut self.data.codebook, &mut self.data.text_embeddings].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.train.validate()?;
        self.decode.validate()?;
        if self.data.index.is_some() && self.data.synthetic.is_some() {
            return Err(CliError::Config("data.index and data.synthetic are mutually exclusive".into()));
        }
        if self.data.index.is_some() && self.data.codebook.is_none() {
            return Err(CliError::Config("data.index needs data.codebook".into()));
        }
        Ok(())
    }

    pub fn precision(&self) -> Result<Precision, CliError> {
        if let Some(p) = self.precision {
            return Ok(p);
        }
        default_precision()
    }
}

pub fn default_precision() -> Result<Precision, CliError> {
    match std::env::var(PRECISION_ENV) {
        Ok(v) if !v.is_empty() => v.parse().map_err(|e| CliError::Config(format!("{PRECISION_ENV}: {e}"))),
        _ => Ok(Precision::F32),
    }
}
