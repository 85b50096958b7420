use super::{config_err, linear, norm, LayerConfig};
use crate::error::Result;
use crate::float::Float;
use crate::ops::Ops;
use crate::params::{LinearParams, NormParams, ParamBuilder};

/// Pre-norm Transformer block with full bidirectional attention and a GELU
/// MLP.
#[derive(Debug, Clone)]
pub struct Transformer {
    pub width: usize,
    pub heads: usize,
    norm1: NormParams,
    qkv: LinearParams,
    proj: LinearParams,
    norm2: NormParams,
    fc1: LinearParams,
    fc2: LinearParams,
}

impl Transformer {
    pub fn register(b: &mut ParamBuilder<'_>, width: usize, cfg: &LayerConfig) -> Result<Self> {
        let heads = cfg.heads(width);
        if width == 0 || !width.is_multiple_of(heads) {
            return Err(config_err(format!("width {width} is not divisible by {heads} heads")));
        }
        let hidden = cfg.mlp_ratio * width;
        Ok(Self {
            width,
            heads,
            norm1: b.layer_norm("norm1", width),
            qkv: b.linear("qkv", width, 3 * width, true),
            proj: b.linear("proj", width, width, true),
            norm2: b.layer_norm("norm2", width),
            fc1: b.linear("fc1", width, hidden, true),
            fc2: b.linear("fc2", hidden, width, true),
        })
    }

    pub fn forward<T: Float, O: Ops<T>>(&self, ops: &mut O, x: &O::V) -> Result<O::V> {
        let h = norm(ops, &self.norm1, x)?;
        let qkv = linear(ops, &self.qkv, &h)?;
        drop(h);
        let a = ops.attention(&qkv, self.heads)?;
        drop(qkv);
        let a = linear(ops, &self.proj, &a)?;
        let x = ops.add(x, &a)?;
        drop(a);

        let h = norm(ops, &self.norm2, &x)?;
        let h = linear(ops, &self.fc1, &h)?;
        let h = ops.gelu(&h)?;
        let h = linear(ops, &self.fc2, &h)?;
        ops.add(&x, &h)
    }
}
