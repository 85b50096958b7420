use serde::{Deserialize, Serialize};

use crate::alloc::try_alloc;
use crate::error::{Error, Result};
use crate::float::Float;

/// Padding regime for the depthwise sequence convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvMode {
    /// `K - 1` zeros on the left; output `t` sees inputs `<= t` only.
    Causal,
    /// `(K - 1) / 2` zeros on each side; requires odd `K`.
    Standard,
}

impl ConvMode {
    pub fn left_pad(self, k: usize) -> Result<usize> {
        if k < 1 {
            return Err(Error::invalid("conv1d", "kernel size must be >= 1"));
        }
        match self {
            ConvMode::Causal => Ok(k - 1),
            ConvMode::Standard if k % 2 == 1 => Ok((k - 1) / 2),
            ConvMode::Standard => Err(Error::invalid("conv1d", format!("standard mode needs an odd kernel, got {k}"))),
        }
    }
}

/// Depthwise conv over `x[batch, len, ch]` with `kernel[k, ch]`.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_forward<T: Float>(
    x: &[T],
    batch: usize,
    len: usize,
    ch: usize,
    kernel: &[T],
    k: usize,
    bias: Option<&[T]>,
    mode: ConvMode,
) -> Result<Vec<T>> {
    let pad = mode.left_pad(k)?;
    let mut y = try_alloc(batch * len * ch)?;
    for b in 0..batch {
        let xb = &x[b * len * ch..(b + 1) * len * ch];
        let yb = &mut y[b * len * ch..(b + 1) * len * ch];
        for t in 0..len {
            let yr = &mut yb[t * ch..(t + 1) * ch];
            if let Some(bias) = bias {
                yr.copy_from_slice(bias);
            }
            for j in 0..k {
                let s = t as isize + j as isize - pad as isize;
                if s < 0 || s >= len as isize {
                    continue;
                }
                let xr = &xb[s as usize * ch..(s as usize + 1) * ch];
                let kr = &kernel[j * ch..(j + 1) * ch];
                for c in 0..ch {
                    yr[c] += kr[c] * xr[c];
                }
            }
        }
    }
    Ok(y)
}

/// Returns `(dx, dkernel, dbias)`.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward<T: Float>(
    x: &[T],
    batch: usize,
    len: usize,
    ch: usize,
    kernel: &[T],
    k: usize,
    mode: ConvMode,
    dy: &[T],
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let pad = mode.left_pad(k)?;
    let mut dx = try_alloc(x.len())?;
    let mut dk = vec![T::ZERO; k * ch];
    let mut db = vec![T::ZERO; ch];
    for b in 0..batch {
        let off = b * len * ch;
        for t in 0..len {
            let dyr = &dy[off + t * ch..off + (t + 1) * ch];
            db.iter_mut().zip(dyr).for_each(|(a, &g)| *a += g);
            for j in 0..k {
                let s = t as isize + j as isize - pad as isize;
                if s < 0 || s >= len as isize {
                    continue;
                }
                let s = s as usize;
                for c in 0..ch {
                    dx[off + s * ch + c] += kernel[j * ch + c] * dyr[c];
                    dk[j * ch + c] += x[off + s * ch + c] * dyr[c];
                }
            }
        }
    }
    Ok((dx, dk, db))
}
