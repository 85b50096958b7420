//! Dataset, codebook and text-embedder resolution from a run config.

use maskmamba_core::backbone::CondKind;
use maskmamba_core::data::{Dataset, Label};
use maskmamba_core::text::{FileEmbedder, HashEmbedder, TextEmbedder};
use maskmamba_core::tokenizer::Codebook;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub struct Inputs {
    pub data: Dataset,
    pub codebook: Codebook,
    pub embedder: Option<Box<dyn TextEmbedder>>,
}

impl Inputs {
    pub fn embedder(&self) -> Option<&dyn TextEmbedder> {
        self.embedder.as_deref()
    }
}

pub fn codebook(cfg: &RunConfig) -> Result<Codebook> {
    let k = cfg.model.codebook_size;
    let cb = match (&cfg.data.codebook, &cfg.data.synthetic) {
        (Some(path), _) => Codebook::load(path)?,
        (None, Some(s)) => Codebook::random(k, s.patch, s.channels, s.seed)?,
        (None, None) => return Err(CliError::Config("no codebook: set data.codebook or data.synthetic".into())),
    };
    if cb.k() != k {
        return Err(CliError::Config(format!("codebook has {} entries, model.codebook_size is {k}", cb.k())));
    }
    Ok(cb)
}

pub fn embedder(cfg: &RunConfig) -> Result<Option<Box<dyn TextEmbedder>>> {
    if cfg.model.cond_kind != CondKind::Text {
        return Ok(None);
    }
    Ok(Some(match &cfg.data.text_embeddings {
        Some(path) => Box::new(FileEmbedder::load(path)?),
        None => Box::new(HashEmbedder { len: cfg.model.text_len, dim: cfg.model.text_dim }),
    }))
}

/// Caption used for synthetic examples of class `c` under text conditioning.
pub fn synthetic_caption(c: usize) -> String {
    format!("synthetic image {c}")
}

pub fn load(cfg: &RunConfig) -> Result<Inputs> {
    let codebook = codebook(cfg)?;
    let m = &cfg.model;
    let mut data = match (&cfg.data.index, &cfg.data.synthetic) {
        (Some(index), _) => Dataset::load(index, &codebook, m)?,
        (None, Some(s)) => Dataset::synthetic(s.images, m.n_classes, m.grid_h, m.grid_w, m.codebook_size, s.seed),
        (None, None) => return Err(CliError::Config("no data: set data.index or data.synthetic".into())),
    };
    if data.is_empty() {
        return Err(CliError::Usage("dataset is empty".into()));
    }
    if cfg.data.synthetic.is_some() && m.cond_kind == CondKind::Text {
        for e in &mut data.examples {
            if let Label::Class(c) = e.label {
                e.label = Label::Caption(synthetic_caption(c));
            }
        }
    }
    Ok(Inputs { data, codebook, embedder: embedder(cfg)? })
}
