use serde::{Deserialize, Serialize};

use super::{config_err, linear, norm, Activation, ConvParams, LayerConfig};
use crate::error::Result;
use crate::float::Float;
use crate::kernels::ConvMode;
use crate::ops::Ops;
use crate::params::{LinearParams, NormParams, ParamBuilder};
use crate::ssm::{ssm_forward, ScanKernel, SsmIds};

/// Which scan directions feed `x̂`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Directions {
    Both,
    ForwardOnly,
    BackwardOnly,
}

/// Bi-Mamba-v2:
///
/// ```text
/// x  = σ(Conv(Linear(C, C/2)(X)))
/// x̂  = ForwardSSM(x) + Flip(BackwardSSM(Flip(x)))
/// z  = σ(Conv(Linear(C, C/2)(X)))
/// X' = X + Linear(C, C)(Concat(x̂, z))
/// ```
///
/// `X` is layer-normalized before both projections. Convolutions are
/// standard (non-causal) and the two SSMs have independent parameters.
#[derive(Debug, Clone)]
pub struct BiMambaV2 {
    pub width: usize,
    pub directions: Directions,
    norm: NormParams,
    proj_x: LinearParams,
    conv_x: ConvParams,
    ssm_fwd: Option<SsmIds>,
    ssm_bwd: Option<SsmIds>,
    proj_z: LinearParams,
    conv_z: ConvParams,
    proj_out: LinearParams,
    act: Activation,
    scan: ScanKernel,
}

impl BiMambaV2 {
    pub fn register(b: &mut ParamBuilder<'_>, width: usize, directions: Directions, cfg: &LayerConfig) -> Result<Self> {
        if width == 0 || !width.is_multiple_of(2) {
            return Err(config_err(format!("Bi-Mamba-v2 needs an even width, got {width}")));
        }
        let half = width / 2;
        let k = cfg.conv_kernel_v2;
        let norm = b.layer_norm("norm", width);
        let proj_x = b.linear("proj_x", width, half, true);
        let conv_x = ConvParams::register(b, "conv_x", k, half, ConvMode::Standard)?;
        let ssm_fwd = (directions != Directions::BackwardOnly)
            .then(|| SsmIds::register(&mut b.sub("ssm_fwd"), half, cfg.d_state));
        let ssm_bwd =
            (directions != Directions::ForwardOnly).then(|| SsmIds::register(&mut b.sub("ssm_bwd"), half, cfg.d_state));
        let proj_z = b.linear("proj_z", width, half, true);
        let conv_z = ConvParams::register(b, "conv_z", k, half, ConvMode::Standard)?;
        let proj_out = b.linear("proj_out", width, width, true);
        Ok(Self {
            width,
            directions,
            norm,
            proj_x,
            conv_x,
            ssm_fwd,
            ssm_bwd,
            proj_z,
            conv_z,
            proj_out,
            act: cfg.activation,
            scan: cfg.scan,
        })
    }

    pub fn forward<T: Float, O: Ops<T>>(&self, ops: &mut O, input: &O::V) -> Result<O::V> {
        let h = norm(ops, &self.norm, input)?;

        let x = linear(ops, &self.proj_x, &h)?;
        let x = self.conv_x.apply(ops, &x)?;
        let x = self.act.apply(ops, &x)?;
        let fwd = match &self.ssm_fwd {
            Some(ids) => Some(ssm_forward(ops, ids, &x, self.scan)?),
            None => None,
        };
        let bwd = match &self.ssm_bwd {
            Some(ids) => {
                let flipped = ops.flip(&x, 1)?;
                let y = ssm_forward(ops, ids, &flipped, self.scan)?;
                Some(ops.flip(&y, 1)?)
            }
            None => None,
        };
        drop(x);
        let x_hat = match (fwd, bwd) {
            (Some(f), Some(b)) => ops.add(&f, &b)?,
            (Some(v), None) | (None, Some(v)) => v,
            (None, None) => unreachable!("at least one direction is registered"),
        };

        let z = linear(ops, &self.proj_z, &h)?;
        drop(h);
        let z = self.conv_z.apply(ops, &z)?;
        let z = self.act.apply(ops, &z)?;

        let cat = ops.concat(&[&x_hat, &z], 2)?;
        let out = linear(ops, &self.proj_out, &cat)?;
        ops.add(input, &out)
    }
}
