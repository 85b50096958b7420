//! Token-grid datasets: image folders with an index file, or synthetic
//! codebook-tiled images.
//!
//! Index format: one record per line, `path<TAB>label`. Paths are relative
//! to the index file's directory. The label is a class id for class
//! conditioning or free caption text for text conditioning. Blank lines and
//! lines starting with `#` are skipped.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Cond, CondKind, ModelConfig};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::image::read_image;
use crate::tensor::Tensor;
use crate::text::TextEmbedder;
use crate::tokenizer::{encode, Codebook, TokenGrid};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Label {
    Class(usize),
    Caption(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub grid: TokenGrid,
    pub label: Label,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

pub fn parse_index(text: &str) -> Result<Vec<(PathBuf, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (path, label) = line
            .split_once('\t')
            .ok_or_else(|| Error::Format(format!("index line {}: expected 'path<TAB>label'", n + 1)))?;
        out.push((PathBuf::from(path), label.to_string()));
    }
    Ok(out)
}

pub fn parse_label(raw: &str, kind: CondKind, n_classes: usize) -> Result<Label> {
    match kind {
        CondKind::Class => {
            let id: usize =
                raw.trim().parse().map_err(|_| Error::Format(format!("class label '{raw}' is not an integer")))?;
            if id >= n_classes {
                return Err(Error::Format(format!("class label {id} outside 0..{n_classes}")));
            }
            Ok(Label::Class(id))
        }
        CondKind::Text => Ok(Label::Caption(raw.to_string())),
    }
}

impl Dataset {
    /// Reads every indexed image and tokenizes it with `codebook`.
    pub fn load(index: &Path, codebook: &Codebook, config: &ModelConfig) -> Result<Self> {
        let text = std::fs::read_to_string(index)?;
        let root = index.parent().unwrap_or(Path::new("."));
        let mut examples = Vec::new();
        for (path, raw) in parse_index(&text)? {
            let image = read_image(&root.join(&path))?;
            let grid = encode(&image, codebook)?;
            if (grid.h, grid.w) != (config.grid_h, config.grid_w) {
                return Err(Error::Config(format!(
                    "{} tokenizes to {}x{}, model expects {}x{}",
                    path.display(),
                    grid.h,
                    grid.w,
                    config.grid_h,
                    config.grid_w
                )));
            }
            examples.push(Example { grid, label: parse_label(&raw, config.cond_kind, config.n_classes)? });
        }
        Ok(Self { examples })
    }

    /// `n` uniformly random grids; example `i` gets class `i mod n_classes`.
    pub fn synthetic(n: usize, n_classes: usize, h: usize, w: usize, k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let examples = (0..n)
            .map(|i| Example {
                grid: TokenGrid { ids: (0..h * w).map(|_| rng.random_range(0..k)).collect(), h, w },
                label: Label::Class(i % n_classes.max(1)),
            })
            .collect();
        Self { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn histogram(&self, k: usize) -> Vec<f64> {
        histogram(self.examples.iter().map(|e| &e.grid), k)
    }

    /// Flattened targets and conditions for the examples at `indices`.
    pub fn batch<T: Float>(
        &self,
        indices: &[usize],
        config: &ModelConfig,
        embedder: Option<&dyn TextEmbedder>,
    ) -> Result<(Vec<usize>, Cond<T>)> {
        let examples: Vec<&Example> = indices.iter().map(|&i| &self.examples[i]).collect();
        let tokens = examples.iter().flat_map(|e| e.grid.ids.iter().copied()).collect();
        let labels: Vec<&Label> = examples.iter().map(|e| &e.label).collect();
        Ok((tokens, conditions(&labels, config, embedder)?))
    }
}

/// Builds a condition batch from labels, embedding captions when needed.
pub fn conditions<T: Float>(
    labels: &[&Label],
    config: &ModelConfig,
    embedder: Option<&dyn TextEmbedder>,
) -> Result<Cond<T>> {
    match config.cond_kind {
        CondKind::Class => {
            let ids = labels
                .iter()
                .map(|l| match l {
                    Label::Class(c) => Ok(*c),
                    Label::Caption(_) => Err(Error::Config("caption label for a class-conditioned model".into())),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Cond::class(ids))
        }
        CondKind::Text => {
            let emb = embedder.ok_or_else(|| Error::Config("text conditioning needs a text embedder".into()))?;
            if (emb.len(), emb.dim()) != (config.text_len, config.text_dim) {
                return Err(Error::Config(format!(
                    "text embedder yields [{}, {}], model expects [{}, {}]",
                    emb.len(),
                    emb.dim(),
                    config.text_len,
                    config.text_dim
                )));
            }
            let mut feats = Vec::with_capacity(labels.len() * emb.len() * emb.dim());
            for l in labels {
                let caption = match l {
                    Label::Caption(c) => c.as_str(),
                    Label::Class(_) => return Err(Error::Config("class label for a text-conditioned model".into())),
                };
                feats.extend(emb.embed(caption)?.into_iter().map(|v| T::from_f64(v as f64)));
            }
            Ok(Cond::text(Tensor::from_vec(&[labels.len(), emb.len(), emb.dim()], feats)?))
        }
    }
}

/// Normalized token frequencies over `grids`.
pub fn histogram<'a>(grids: impl IntoIterator<Item = &'a TokenGrid>, k: usize) -> Vec<f64> {
    let mut counts = vec![0f64; k];
    let mut total = 0f64;
    for g in grids {
        for &id in &g.ids {
            if id < k {
                counts[id] += 1.0;
            }
            total += 1.0;
        }
    }
    if total > 0.0 {
        counts.iter_mut().for_each(|c| *c /= total);
    }
    counts
}

/// Total-variation distance `½ Σ |p − q|`.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}
