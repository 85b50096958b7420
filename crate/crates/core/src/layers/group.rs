use super::{config_err, linear, norm, BiMambaV2, Directions, LayerConfig, LayerKind, Transformer};
use crate::error::Result;
use crate::float::Float;
use crate::ops::Ops;
use crate::params::{LinearParams, NormParams, ParamBuilder};

#[derive(Debug, Clone)]
enum Branch {
    Mamba(BiMambaV2),
    Attention(Transformer),
}

/// Channel-grouped hybrid: the input is split along channels, each group
/// goes through its own branch, and the concatenation is normalized and
/// projected (`y = x + Linear(C, C)(Norm(Concat(...)))`).
///
/// `group_v1`: two halves, Bi-Mamba-v2 and Transformer.
/// `group_v2`: four quarters, forward-SSM branch, backward-SSM branch and two
/// independent Transformers.
#[derive(Debug, Clone)]
pub struct GroupLayer {
    pub kind: LayerKind,
    pub width: usize,
    branches: Vec<Branch>,
    norm: NormParams,
    proj: LinearParams,
}

impl GroupLayer {
    fn split_width(width: usize, groups: usize) -> Result<usize> {
        if width == 0 || !width.is_multiple_of(groups) {
            return Err(config_err(format!("width {width} is not divisible into {groups} groups")));
        }
        Ok(width / groups)
    }

    pub fn register_v1(b: &mut ParamBuilder<'_>, width: usize, cfg: &LayerConfig) -> Result<Self> {
        let g = Self::split_width(width, 2)?;
        let branches = vec![
            Branch::Mamba(BiMambaV2::register(&mut b.sub("g0"), g, Directions::Both, cfg)?),
            Branch::Attention(Transformer::register(&mut b.sub("g1"), g, cfg)?),
        ];
        Ok(Self::finish(b, LayerKind::GroupV1, width, branches))
    }

    pub fn register_v2(b: &mut ParamBuilder<'_>, width: usize, cfg: &LayerConfig) -> Result<Self> {
        let g = Self::split_width(width, 4)?;
        let branches = vec![
            Branch::Mamba(BiMambaV2::register(&mut b.sub("g0"), g, Directions::ForwardOnly, cfg)?),
            Branch::Mamba(BiMambaV2::register(&mut b.sub("g1"), g, Directions::BackwardOnly, cfg)?),
            Branch::Attention(Transformer::register(&mut b.sub("g2"), g, cfg)?),
            Branch::Attention(Transformer::register(&mut b.sub("g3"), g, cfg)?),
        ];
        Ok(Self::finish(b, LayerKind::GroupV2, width, branches))
    }

    fn finish(b: &mut ParamBuilder<'_>, kind: LayerKind, width: usize, branches: Vec<Branch>) -> Self {
        let norm = b.layer_norm("norm", width);
        let proj = b.linear("proj", width, width, true);
        Self { kind, width, branches, norm, proj }
    }

    pub fn group_widths(&self) -> Vec<usize> {
        vec![self.width / self.branches.len(); self.branches.len()]
    }

    pub fn forward<T: Float, O: Ops<T>>(&self, ops: &mut O, x: &O::V) -> Result<O::V> {
        let parts = ops.split(x, 2, &self.group_widths())?;
        let mut outs = Vec::with_capacity(parts.len());
        for (branch, part) in self.branches.iter().zip(&parts) {
            outs.push(match branch {
                Branch::Mamba(l) => l.forward(ops, part)?,
                Branch::Attention(l) => l.forward(ops, part)?,
            });
        }
        drop(parts);
        let refs: Vec<&O::V> = outs.iter().collect();
        let cat = ops.concat(&refs, 2)?;
        drop(outs);
        let h = norm(ops, &self.norm, &cat)?;
        let h = linear(ops, &self.proj, &h)?;
        ops.add(x, &h)
    }
}
