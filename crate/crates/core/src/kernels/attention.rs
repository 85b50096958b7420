//! Full (unmasked) multi-head self-attention over a packed `[q | k | v]`
//! projection.
//!
//! The score matrix is materialized one head at a time, so transient memory
//! is `len²` per call plus the linear-size buffers.

use crate::alloc::try_alloc;
use crate::error::Result;
use crate::float::Float;

use super::{softmax_backward, softmax_rows_inplace};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionShape {
    pub batch: usize,
    pub len: usize,
    /// Model width `C`; the packed input has width `3C`.
    pub width: usize,
    pub heads: usize,
}

impl AttentionShape {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    fn scale<T: Float>(&self) -> T {
        T::ONE / T::from_f64(self.head_dim() as f64).sqrt()
    }
}

/// Returns the attended values `[batch, len, width]` and, when
/// `keep_probs` is set, the row-stochastic attention weights
/// `[batch, heads, len, len]`.
pub fn attention_forward<T: Float>(qkv: &[T], s: AttentionShape, keep_probs: bool) -> Result<(Vec<T>, Option<Vec<T>>)> {
    let (l, c, dh) = (s.len, s.width, s.head_dim());
    let mut out = try_alloc(s.batch * l * c)?;
    let mut probs = if keep_probs { Some(try_alloc(s.batch * s.heads * l * l)?) } else { None };
    let mut scratch = if keep_probs { Vec::new() } else { try_alloc(l * l)? };
    for b in 0..s.batch {
        let base = b * l * 3 * c;
        for h in 0..s.heads {
            let p = match probs.as_mut() {
                Some(all) => &mut all[(b * s.heads + h) * l * l..(b * s.heads + h + 1) * l * l],
                None => &mut scratch[..],
            };
            // scores = scale · Q_h K_hᵀ
            T::gemm(
                l,
                dh,
                l,
                s.scale(),
                &qkv[base + h * dh..],
                (3 * c, 1),
                &qkv[base + c + h * dh..],
                (1, 3 * c),
                T::ZERO,
                p,
                (l, 1),
            );
            softmax_rows_inplace(p, l);
            T::gemm(
                l,
                l,
                dh,
                T::ONE,
                p,
                (l, 1),
                &qkv[base + 2 * c + h * dh..],
                (3 * c, 1),
                T::ZERO,
                &mut out[b * l * c + h * dh..],
                (c, 1),
            );
        }
    }
    Ok((out, probs))
}

/// Gradient of [`attention_forward`] with respect to the packed input.
pub fn attention_backward<T: Float>(qkv: &[T], probs: &[T], s: AttentionShape, dout: &[T]) -> Result<Vec<T>> {
    let (l, c, dh) = (s.len, s.width, s.head_dim());
    let mut dqkv = try_alloc(qkv.len())?;
    let mut dp = try_alloc(l * l)?;
    for b in 0..s.batch {
        let base = b * l * 3 * c;
        let obase = b * l * c;
        for h in 0..s.heads {
            let p = &probs[(b * s.heads + h) * l * l..(b * s.heads + h + 1) * l * l];
            // dV_h = Pᵀ dO_h
            T::gemm(
                l,
                l,
                dh,
                T::ONE,
                p,
                (1, l),
                &dout[obase + h * dh..],
                (c, 1),
                T::ZERO,
                &mut dqkv[base + 2 * c + h * dh..],
                (3 * c, 1),
            );
            // dP = dO_h V_hᵀ
            T::gemm(
                l,
                dh,
                l,
                T::ONE,
                &dout[obase + h * dh..],
                (c, 1),
                &qkv[base + 2 * c + h * dh..],
                (1, 3 * c),
                T::ZERO,
                &mut dp,
                (l, 1),
            );
            let ds = softmax_backward(p, &dp, l)?;
            // dQ_h = scale · dS K_h ; dK_h = scale · dSᵀ Q_h
            T::gemm(
                l,
                l,
                dh,
                s.scale(),
                &ds,
                (l, 1),
                &qkv[base + c + h * dh..],
                (3 * c, 1),
                T::ZERO,
                &mut dqkv[base + h * dh..],
                (3 * c, 1),
            );
            T::gemm(
                l,
                l,
                dh,
                s.scale(),
                &ds,
                (1, l),
                &qkv[base + h * dh..],
                (3 * c, 1),
                T::ZERO,
                &mut dqkv[base + c + h * dh..],
                (3 * c, 1),
            );
        }
    }
    Ok(dqkv)
}
