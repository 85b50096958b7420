//! Full MaskMamba models: embeddings, condition insertion, the hybrid layer
//! stack and the token head.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::Float;
use crate::layers::{self, Layer, LayerConfig, LayerKind};
use crate::ops::Ops;
use crate::params::{Init, LinearParams, NormParams, ParamId, ParamLayout};
use crate::tensor::Tensor;

/// Text-condition length used by the text-conditional models.
pub const TEXT_LEN: usize = 120;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    PureMamba,
    PureTransformer,
    GroupV1,
    GroupV2,
    SerialV1,
    SerialV2,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 6] = [
        SchemeKind::PureMamba,
        SchemeKind::PureTransformer,
        SchemeKind::GroupV1,
        SchemeKind::GroupV2,
        SchemeKind::SerialV1,
        SchemeKind::SerialV2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::PureMamba => "pure_mamba",
            SchemeKind::PureTransformer => "pure_transformer",
            SchemeKind::GroupV1 => "group_v1",
            SchemeKind::GroupV2 => "group_v2",
            SchemeKind::SerialV1 => "serial_v1",
            SchemeKind::SerialV2 => "serial_v2",
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SchemeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme '{s}'")))
    }
}

/// Mamba layer used by the pure-Mamba and serial schemes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MambaKind {
    #[default]
    BimambaV2,
    Bimamba,
}

impl MambaKind {
    pub fn layer_kind(self) -> LayerKind {
        match self {
            MambaKind::BimambaV2 => LayerKind::BiMambaV2,
            MambaKind::Bimamba => LayerKind::BiMamba,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondPos {
    Head,
    #[default]
    Middle,
    Tail,
}

impl CondPos {
    pub const ALL: [CondPos; 3] = [CondPos::Head, CondPos::Middle, CondPos::Tail];

    pub fn name(self) -> &'static str {
        match self {
            CondPos::Head => "head",
            CondPos::Middle => "middle",
            CondPos::Tail => "tail",
        }
    }
}

impl fmt::Display for CondPos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondKind {
    #[default]
    Class,
    Text,
}

/// Architecture description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    /// Hidden width `C`.
    pub hidden: usize,
    pub scheme: SchemeKind,
    pub mamba_kind: MambaKind,
    pub cond_pos: CondPos,
    /// Codebook size `K`; the vocabulary is `K + 1` with the mask token last.
    pub codebook_size: usize,
    pub cond_kind: CondKind,
    pub n_classes: usize,
    pub text_len: usize,
    pub text_dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub tie_head: bool,
    pub layer: LayerConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            hidden: 64,
            scheme: SchemeKind::SerialV2,
            mamba_kind: MambaKind::BimambaV2,
            cond_pos: CondPos::Middle,
            codebook_size: 64,
            cond_kind: CondKind::Class,
            n_classes: 10,
            text_len: TEXT_LEN,
            text_dim: 64,
            grid_h: 8,
            grid_w: 8,
            tie_head: false,
            layer: LayerConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Named sizes: `b` (12 × 768), `l` (24 × 1024), `xl` (36 × 1280), on a
    /// 16 × 16 grid with 1000 classes.
    pub fn preset(name: &str) -> Result<Self> {
        let (n_layers, hidden) = match name.to_ascii_lowercase().as_str() {
            "b" => (12, 768),
            "l" => (24, 1024),
            "xl" => (36, 1280),
            other => return Err(Error::Config(format!("unknown preset '{other}' (expected b, l or xl)"))),
        };
        Ok(Self { n_layers, hidden, codebook_size: 1024, n_classes: 1000, grid_h: 16, grid_w: 16, ..Self::default() })
    }

    pub fn vocab_size(&self) -> usize {
        self.codebook_size + 1
    }

    pub fn mask_token_id(&self) -> usize {
        self.codebook_size
    }

    pub fn n_image(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn cond_len(&self) -> usize {
        match self.cond_kind {
            CondKind::Class => 1,
            CondKind::Text => self.text_len,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.n_image() + self.cond_len()
    }

    pub fn sequence_layout(&self) -> SequenceLayout {
        SequenceLayout::new(self.n_image(), self.cond_len(), self.cond_pos)
    }

    /// Layer kinds in stack order.
    pub fn layer_kinds(&self) -> Vec<LayerKind> {
        let n = self.n_layers;
        let m = self.mamba_kind.layer_kind();
        match self.scheme {
            SchemeKind::PureMamba => vec![m; n],
            SchemeKind::PureTransformer => vec![LayerKind::Transformer; n],
            SchemeKind::GroupV1 => vec![LayerKind::GroupV1; n],
            SchemeKind::GroupV2 => vec![LayerKind::GroupV2; n],
            SchemeKind::SerialV1 => (0..n).map(|i| if i % 2 == 0 { m } else { LayerKind::Transformer }).collect(),
            SchemeKind::SerialV2 => (0..n).map(|i| if i < n / 2 { m } else { LayerKind::Transformer }).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.hidden == 0 {
            return fail("n_layers and hidden must be positive".into());
        }
        if matches!(self.scheme, SchemeKind::SerialV1 | SchemeKind::SerialV2) && !self.n_layers.is_multiple_of(2) {
            return fail(format!("{} needs an even layer count, got {}", self.scheme, self.n_layers));
        }
        if self.codebook_size < 2 {
            return fail(format!("codebook_size must be at least 2, got {}", self.codebook_size));
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return fail("grid dimensions must be positive".into());
        }
        match self.cond_kind {
            CondKind::Class if self.n_classes == 0 => fail("n_classes must be positive".into()),
            CondKind::Text if self.text_len == 0 || self.text_dim == 0 => {
                fail("text_len and text_dim must be positive".into())
            }
            _ => Ok(()),
        }
    }
}

/// Placement of condition slots within the flattened sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceLayout {
    pub n_image: usize,
    pub cond_len: usize,
    pub cond_start: usize,
}

impl SequenceLayout {
    pub fn new(n_image: usize, cond_len: usize, pos: CondPos) -> Self {
        let cond_start = match pos {
            CondPos::Head => 0,
            CondPos::Middle => n_image / 2,
            CondPos::Tail => n_image,
        };
        Self { n_image, cond_len, cond_start }
    }

    pub fn seq_len(&self) -> usize {
        self.n_image + self.cond_len
    }

    /// Sequence slot of image cell `i`.
    pub fn image_slot(&self, i: usize) -> usize {
        if i < self.cond_start {
            i
        } else {
            i + self.cond_len
        }
    }

    pub fn is_cond_slot(&self, slot: usize) -> bool {
        (self.cond_start..self.cond_start + self.cond_len).contains(&slot)
    }

    /// Drops condition slots from a per-slot sequence, restoring image order.
    pub fn remove_cond<X: Clone>(&self, seq: &[X]) -> Vec<X> {
        seq.iter().enumerate().filter(|(s, _)| !self.is_cond_slot(*s)).map(|(_, x)| x.clone()).collect()
    }
}

/// Per-sample conditions for one batch.
#[derive(Debug, Clone)]
pub enum Cond<T: Float> {
    /// Class ids; samples with `dropped` set use the null embedding.
    Class { ids: Vec<usize>, dropped: Vec<bool> },
    /// Text features `[B, N, text_dim]`.
    Text { feats: Tensor<T>, dropped: Vec<bool> },
}

impl<T: Float> Cond<T> {
    pub fn class(ids: Vec<usize>) -> Self {
        let dropped = vec![false; ids.len()];
        Cond::Class { ids, dropped }
    }

    pub fn text(feats: Tensor<T>) -> Self {
        let b = feats.shape().first().copied().unwrap_or(0);
        Cond::Text { feats, dropped: vec![false; b] }
    }

    pub fn batch(&self) -> usize {
        match self {
            Cond::Class { ids, .. } => ids.len(),
            Cond::Text { dropped, .. } => dropped.len(),
        }
    }

    pub fn dropped(&self) -> &[bool] {
        match self {
            Cond::Class { dropped, .. } | Cond::Text { dropped, .. } => dropped,
        }
    }

    pub fn with_dropped(mut self, mask: Vec<bool>) -> Self {
        match &mut self {
            Cond::Class { dropped, .. } | Cond::Text { dropped, .. } => *dropped = mask,
        }
        self
    }

    /// The same batch with every condition replaced by the null embedding.
    pub fn to_null(&self) -> Self {
        let b = self.batch();
        self.clone().with_dropped(vec![true; b])
    }
}

#[derive(Debug, Clone)]
enum CondIds {
    /// `[n_classes + 1, C]`, last row is the null class.
    Class {
        table: ParamId,
    },
    Text {
        proj: LinearParams,
        null: ParamId,
    },
}

/// An assembled model: structure and parameter handles. Parameter values
/// live in a separate [`crate::ParamStore`].
#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    tok_emb: ParamId,
    cond: CondIds,
    pos_emb: ParamId,
    layers: Vec<Layer>,
    final_norm: NormParams,
    head_w: Option<ParamId>,
    head_b: ParamId,
    forwards: AtomicUsize,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            tok_emb: self.tok_emb,
            cond: self.cond.clone(),
            pos_emb: self.pos_emb,
            layers: self.layers.clone(),
            final_norm: self.final_norm,
            head_w: self.head_w,
            head_b: self.head_b,
            forwards: AtomicUsize::new(self.forward_count()),
        }
    }
}

/// Builds the model structure and the matching parameter layout.
pub fn assemble(config: &ModelConfig) -> Result<(Model, ParamLayout)> {
    config.validate()?;
    let c = config.hidden;
    let mut layout = ParamLayout::new();
    let mut root = layout.root();
    let tok_emb = root.add("tok_emb", &[config.vocab_size(), c], Init::Normal(0.02), true);
    let cond = match config.cond_kind {
        CondKind::Class => {
            CondIds::Class { table: root.add("class_emb", &[config.n_classes + 1, c], Init::Normal(0.02), true) }
        }
        CondKind::Text => CondIds::Text {
            proj: root.linear("text_proj", config.text_dim, c, true),
            null: root.add("text_null", &[config.text_len, c], Init::Normal(0.02), true),
        },
    };
    let pos_emb = root.add("pos_emb", &[config.seq_len(), c], Init::Normal(0.02), true);
    let mut layers = Vec::with_capacity(config.n_layers);
    for (i, kind) in config.layer_kinds().into_iter().enumerate() {
        layers.push(Layer::register(&mut root.sub(&format!("layers.{i}")), kind, c, &config.layer)?);
    }
    let final_norm = root.layer_norm("final_norm", c);
    let head_w =
        (!config.tie_head).then(|| root.add("head.weight", &[c, config.vocab_size()], Init::Normal(0.02), true));
    let head_b = root.add("head.bias", &[config.vocab_size()], Init::Zeros, false);
    let model = Model {
        config: config.clone(),
        tok_emb,
        cond,
        pos_emb,
        layers,
        final_norm,
        head_w,
        head_b,
        forwards: AtomicUsize::new(0),
    };
    Ok((model, layout))
}

/// Exact number of scalar parameters of the assembled model.
pub fn param_count(config: &ModelConfig) -> Result<usize> {
    Ok(assemble(config)?.1.total())
}

impl Model {
    pub fn layer_kinds(&self) -> Vec<LayerKind> {
        self.layers.iter().map(Layer::kind).collect()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layout(&self) -> SequenceLayout {
        self.config.sequence_layout()
    }

    /// Number of full forward passes run through [`Model::logits`].
    pub fn forward_count(&self) -> usize {
        self.forwards.load(Ordering::Relaxed)
    }

    pub fn reset_forward_count(&self) {
        self.forwards.store(0, Ordering::Relaxed);
    }

    fn cond_embedding<T: Float, O: Ops<T>>(&self, ops: &mut O, cond: &Cond<T>) -> Result<O::V> {
        let b = cond.batch();
        if cond.dropped().len() != b {
            return Err(Error::invalid("cond", "dropout mask length differs from batch"));
        }
        match (&self.cond, cond) {
            (CondIds::Class { table }, Cond::Class { ids, dropped }) => {
                let n = self.config.n_classes;
                let mut rows = Vec::with_capacity(b);
                for (&id, &drop) in ids.iter().zip(dropped) {
                    if drop {
                        rows.push(n);
                    } else if id >= n {
                        return Err(Error::invalid("cond", format!("class id {id} outside 0..{n}")));
                    } else {
                        rows.push(id);
                    }
                }
                let t = ops.param(*table)?;
                ops.embedding(&t, &rows, &[b, 1])
            }
            (CondIds::Text { proj, null }, Cond::Text { feats, dropped }) => {
                let (n, c, td) = (self.config.text_len, self.config.hidden, self.config.text_dim);
                if feats.shape() != [b, n, td] {
                    return Err(Error::shape("text condition", &[b, n, td], feats.shape()));
                }
                let null_v = ops.param(*null)?;
                let null_v = ops.reshape(&null_v, &[1, n, c])?;
                if dropped.iter().all(|d| *d) {
                    let refs = vec![&null_v; b];
                    return ops.concat(&refs, 0);
                }
                let f = ops.constant(feats.clone())?;
                let projected = layers::linear(ops, proj, &f)?;
                if !dropped.iter().any(|d| *d) {
                    return Ok(projected);
                }
                let per = ops.split(&projected, 0, &vec![1; b])?;
                let refs: Vec<&O::V> = per.iter().zip(dropped).map(|(p, &d)| if d { &null_v } else { p }).collect();
                ops.concat(&refs, 0)
            }
            _ => Err(Error::invalid("cond", "condition type does not match the model")),
        }
    }

    /// Token + condition embeddings with positional embedding, `[B, S, C]`.
    ///
    /// `tokens` holds `B·h·w` ids in grid order; masked cells carry
    /// [`ModelConfig::mask_token_id`].
    pub fn embed_sequence<T: Float, O: Ops<T>>(&self, ops: &mut O, tokens: &[usize], cond: &Cond<T>) -> Result<O::V> {
        let lay = self.layout();
        let b = cond.batch();
        if tokens.len() != b * lay.n_image {
            return Err(Error::shape("embed_sequence", &[b, lay.n_image], &[tokens.len()]));
        }
        let table = ops.param(self.tok_emb)?;
        let tok = ops.embedding(&table, tokens, &[b, lay.n_image])?;
        let ce = self.cond_embedding(ops, cond)?;
        let halves = ops.split(&tok, 1, &[lay.cond_start, lay.n_image - lay.cond_start])?;
        let seq = ops.concat(&[&halves[0], &ce, &halves[1]], 1)?;
        let pos = ops.param(self.pos_emb)?;
        ops.add(&seq, &pos)
    }

    /// Runs the layer stack and the head on image slots: `[B, h·w, K + 1]`.
    pub fn forward_logits<T: Float, O: Ops<T>>(&self, ops: &mut O, seq: &O::V) -> Result<O::V> {
        let lay = self.layout();
        let shape = ops.shape(seq);
        if shape.len() != 3 || shape[1] != lay.seq_len() || shape[2] != self.config.hidden {
            return Err(Error::shape("forward_logits", &[0, lay.seq_len(), self.config.hidden], &shape));
        }
        let mut h = self.layers[0].forward(ops, seq)?;
        for layer in &self.layers[1..] {
            h = layer.forward(ops, &h)?;
        }
        let h = layers::norm(ops, &self.final_norm, &h)?;
        let parts = ops.split(&h, 1, &[lay.cond_start, lay.cond_len, lay.n_image - lay.cond_start])?;
        drop(h);
        let img = ops.concat(&[&parts[0], &parts[2]], 1)?;
        drop(parts);
        let w = match self.head_w {
            Some(id) => ops.param(id)?,
            None => {
                let t = ops.param(self.tok_emb)?;
                ops.transpose(&t)?
            }
        };
        let bias = ops.param(self.head_b)?;
        ops.linear(&img, &w, Some(&bias))
    }

    /// Embedding plus forward; counted by [`Model::forward_count`].
    pub fn logits<T: Float, O: Ops<T>>(&self, ops: &mut O, tokens: &[usize], cond: &Cond<T>) -> Result<O::V> {
        self.forwards.fetch_add(1, Ordering::Relaxed);
        let seq = self.embed_sequence(ops, tokens, cond)?;
        self.forward_logits(ops, &seq)
    }
}
