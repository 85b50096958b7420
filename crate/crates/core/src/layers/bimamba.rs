use super::{config_err, linear, norm, ConvParams, LayerConfig};
use crate::error::Result;
use crate::float::Float;
use crate::kernels::ConvMode;
use crate::ops::Ops;
use crate::params::{LinearParams, NormParams, ParamBuilder};
use crate::ssm::{ssm_forward, ScanKernel, SsmIds};

/// The original Bi-Mamba block (Vision Mamba style).
///
/// One input projection to `2·E·C` is split into `x` and the gate `z`. Each
/// direction runs its own causal conv and SSM over the full inner width;
/// the summed result is multiplied by `SiLU(z)` and projected back to `C`.
/// With `bidirectional = false` this is the unidirectional Mamba block.
#[derive(Debug, Clone)]
pub struct BiMamba {
    pub width: usize,
    pub inner: usize,
    pub bidirectional: bool,
    norm: NormParams,
    in_proj: LinearParams,
    conv_f: ConvParams,
    ssm_f: SsmIds,
    conv_b: Option<ConvParams>,
    ssm_b: Option<SsmIds>,
    out_proj: LinearParams,
    scan: ScanKernel,
}

impl BiMamba {
    pub fn register(b: &mut ParamBuilder<'_>, width: usize, bidirectional: bool, cfg: &LayerConfig) -> Result<Self> {
        if width == 0 || cfg.expand_v1 == 0 {
            return Err(config_err("Bi-Mamba needs positive width and expand factor"));
        }
        let inner = cfg.expand_v1 * width;
        let k = cfg.conv_kernel_v1;
        let norm = b.layer_norm("norm", width);
        let in_proj = b.linear("in_proj", width, 2 * inner, false);
        let conv_f = ConvParams::register(b, "conv_fwd", k, inner, ConvMode::Causal)?;
        let ssm_f = SsmIds::register(&mut b.sub("ssm_fwd"), inner, cfg.d_state);
        let (conv_b, ssm_b) = if bidirectional {
            (
                Some(ConvParams::register(b, "conv_bwd", k, inner, ConvMode::Causal)?),
                Some(SsmIds::register(&mut b.sub("ssm_bwd"), inner, cfg.d_state)),
            )
        } else {
            (None, None)
        };
        let out_proj = b.linear("out_proj", inner, width, false);
        Ok(Self { width, inner, bidirectional, norm, in_proj, conv_f, ssm_f, conv_b, ssm_b, out_proj, scan: cfg.scan })
    }

    /// Output before the final projection: `(y_f + y_b) ⊙ SiLU(z)`.
    pub fn gated<T: Float, O: Ops<T>>(&self, ops: &mut O, input: &O::V) -> Result<O::V> {
        let h = norm(ops, &self.norm, input)?;
        let xz = linear(ops, &self.in_proj, &h)?;
        drop(h);
        let mut parts = ops.split(&xz, 2, &[self.inner, self.inner])?;
        drop(xz);
        let z = parts.pop().expect("two parts");
        let x = parts.pop().expect("two parts");

        let xf = self.conv_f.apply(ops, &x)?;
        let xf = ops.silu(&xf)?;
        let mut y = ssm_forward(ops, &self.ssm_f, &xf, self.scan)?;
        drop(xf);
        if let (Some(conv_b), Some(ssm_b)) = (&self.conv_b, &self.ssm_b) {
            let xb = ops.flip(&x, 1)?;
            let xb = conv_b.apply(ops, &xb)?;
            let xb = ops.silu(&xb)?;
            let yb = ssm_forward(ops, ssm_b, &xb, self.scan)?;
            drop(xb);
            let yb = ops.flip(&yb, 1)?;
            y = ops.add(&y, &yb)?;
        }
        let gate = ops.silu(&z)?;
        ops.mul(&y, &gate)
    }

    pub fn forward<T: Float, O: Ops<T>>(&self, ops: &mut O, input: &O::V) -> Result<O::V> {
        let y = self.gated(ops, input)?;
        let out = linear(ops, &self.out_proj, &y)?;
        ops.add(input, &out)
    }
}
