//! Layer types compared by the backbone: Bi-Mamba-v2, the original
//! Bi-Mamba (and its unidirectional ancestor), a pre-norm Transformer block,
//! and the channel-grouped hybrids.

mod bimamba;
mod bimamba_v2;
pub mod flops;
mod group;
mod transformer;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use bimamba::BiMamba;
pub use bimamba_v2::{BiMambaV2, Directions};
pub use group::GroupLayer;
pub use transformer::Transformer;

use crate::error::{Error, Result};
use crate::float::Float;
use crate::kernels::ConvMode;
use crate::ops::Ops;
use crate::params::{Init, LinearParams, NormParams, ParamBuilder, ParamId};
use crate::ssm::{ScanKernel, DEFAULT_D_STATE};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
    Gelu,
}

impl Activation {
    pub fn apply<T: Float, O: Ops<T>>(self, ops: &mut O, x: &O::V) -> Result<O::V> {
        match self {
            Activation::Silu => ops.silu(x),
            Activation::Gelu => ops.gelu(x),
        }
    }
}

/// Hyperparameters shared by every layer of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayerConfig {
    pub d_state: usize,
    /// Standard-conv kernel of Bi-Mamba-v2 (odd).
    pub conv_kernel_v2: usize,
    /// Causal-conv kernel of the original Bi-Mamba.
    pub conv_kernel_v1: usize,
    pub expand_v1: usize,
    pub mlp_ratio: usize,
    pub head_dim: usize,
    pub activation: Activation,
    pub scan: ScanKernel,
}

impl Default for LayerConfig {
    fn default() -> Self {
        Self {
            d_state: DEFAULT_D_STATE,
            conv_kernel_v2: 3,
            conv_kernel_v1: 4,
            expand_v1: 2,
            mlp_ratio: 4,
            head_dim: 64,
            activation: Activation::Silu,
            scan: ScanKernel::Sequential,
        }
    }
}

impl LayerConfig {
    pub fn heads(&self, width: usize) -> usize {
        (width / self.head_dim.max(1)).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    BiMambaV2,
    BiMamba,
    /// Unidirectional Mamba, kept for contrast with the bidirectional layers.
    Mamba,
    Transformer,
    GroupV1,
    GroupV2,
}

impl LayerKind {
    pub const ALL: [LayerKind; 6] = [
        LayerKind::BiMambaV2,
        LayerKind::BiMamba,
        LayerKind::Mamba,
        LayerKind::Transformer,
        LayerKind::GroupV1,
        LayerKind::GroupV2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::BiMambaV2 => "bimamba_v2",
            LayerKind::BiMamba => "bimamba",
            LayerKind::Mamba => "mamba",
            LayerKind::Transformer => "transformer",
            LayerKind::GroupV1 => "group_v1",
            LayerKind::GroupV2 => "group_v2",
        }
    }

    /// Single-letter code used when printing layer stacks.
    pub fn letter(self) -> char {
        match self {
            LayerKind::Transformer => 'S',
            LayerKind::GroupV1 | LayerKind::GroupV2 => 'G',
            _ => 'M',
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LayerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown layer kind '{s}'")))
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    BiMambaV2(BiMambaV2),
    BiMamba(BiMamba),
    Transformer(Transformer),
    Group(GroupLayer),
}

impl Layer {
    pub fn register(b: &mut ParamBuilder<'_>, kind: LayerKind, width: usize, cfg: &LayerConfig) -> Result<Self> {
        Ok(match kind {
            LayerKind::BiMambaV2 => Layer::BiMambaV2(BiMambaV2::register(b, width, Directions::Both, cfg)?),
            LayerKind::BiMamba => Layer::BiMamba(BiMamba::register(b, width, true, cfg)?),
            LayerKind::Mamba => Layer::BiMamba(BiMamba::register(b, width, false, cfg)?),
            LayerKind::Transformer => Layer::Transformer(Transformer::register(b, width, cfg)?),
            LayerKind::GroupV1 => Layer::Group(GroupLayer::register_v1(b, width, cfg)?),
            LayerKind::GroupV2 => Layer::Group(GroupLayer::register_v2(b, width, cfg)?),
        })
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::BiMambaV2(_) => LayerKind::BiMambaV2,
            Layer::BiMamba(l) if l.bidirectional => LayerKind::BiMamba,
            Layer::BiMamba(_) => LayerKind::Mamba,
            Layer::Transformer(_) => LayerKind::Transformer,
            Layer::Group(g) => g.kind,
        }
    }

    pub fn forward<T: Float, O: Ops<T>>(&self, ops: &mut O, x: &O::V) -> Result<O::V> {
        match self {
            Layer::BiMambaV2(l) => l.forward(ops, x),
            Layer::BiMamba(l) => l.forward(ops, x),
            Layer::Transformer(l) => l.forward(ops, x),
            Layer::Group(l) => l.forward(ops, x),
        }
    }
}

/// Depthwise 1-D convolution parameters.
#[derive(Debug, Clone, Copy)]
pub struct ConvParams {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub mode: ConvMode,
}

impl ConvParams {
    pub fn register(b: &mut ParamBuilder<'_>, name: &str, k: usize, ch: usize, mode: ConvMode) -> Result<Self> {
        mode.left_pad(k)?;
        let mut sub = b.sub(name);
        let bound = 1.0 / (k as f64).sqrt();
        Ok(Self {
            kernel: sub.add("kernel", &[k, ch], Init::Uniform(-bound, bound), true),
            bias: sub.add("bias", &[ch], Init::Zeros, false),
            mode,
        })
    }

    pub fn apply<T: Float, O: Ops<T>>(&self, ops: &mut O, x: &O::V) -> Result<O::V> {
        let k = ops.param(self.kernel)?;
        let b = ops.param(self.bias)?;
        ops.conv1d(x, &k, Some(&b), self.mode)
    }
}

pub fn linear<T: Float, O: Ops<T>>(ops: &mut O, p: &LinearParams, x: &O::V) -> Result<O::V> {
    let w = ops.param(p.w)?;
    match p.b {
        Some(b) => {
            let b = ops.param(b)?;
            ops.linear(x, &w, Some(&b))
        }
        None => ops.linear(x, &w, None),
    }
}

pub fn norm<T: Float, O: Ops<T>>(ops: &mut O, p: &NormParams, x: &O::V) -> Result<O::V> {
    let g = ops.param(p.gamma)?;
    let b = ops.param(p.beta)?;
    ops.layer_norm(x, &g, &b)
}

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
