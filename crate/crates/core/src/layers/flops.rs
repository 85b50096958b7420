//! Closed-form forward FLOP counts.
//!
//! Conventions: a multiply-accumulate is 2 FLOPs, every other elementwise
//! operation (including `exp` and activations) is 1. Layer norm costs
//! 8 per element (mean 1, centered square 2, variance sum 1, normalize 2,
//! affine 2). Softmax costs 4 per entry (max-subtract, exp, sum, divide).
//! One scan step costs 8 per `(d, n)` pair: `Δ·A`, `exp`, `Ā·h`, `Δ·B`,
//! `·u`, `+`, and the multiply-add of `C·h`. Flips, splits and concatenations
//! move data only and cost nothing.

use super::{LayerConfig, LayerKind};
use crate::ssm::dt_rank;

fn linear(rows: u64, cin: u64, cout: u64, bias: bool) -> u64 {
    2 * rows * cin * cout + if bias { rows * cout } else { 0 }
}

fn norm(rows: u64, c: u64) -> u64 {
    8 * rows * c
}

fn conv(rows: u64, c: u64, k: u64) -> u64 {
    2 * k * rows * c + rows * c
}

pub fn ssm(rows: u64, d: u64, n: u64) -> u64 {
    let r = dt_rank(d as usize) as u64;
    linear(rows, d, r + 2 * n, false) + linear(rows, r, d, true) + rows * d + 8 * rows * d * n + 2 * rows * d
}

/// `QKᵀ` and `AV` (each `2·B·H·L²·dh`), scaling and softmax over `B·H·L²`.
pub fn attention(batch: u64, len: u64, c: u64, heads: u64) -> u64 {
    let dh = c / heads;
    let scores = batch * heads * len * len;
    2 * 2 * scores * dh + scores + 4 * scores
}

fn bimamba_v2(rows: u64, c: u64, dirs: u64, cfg: &LayerConfig) -> u64 {
    let half = c / 2;
    let (k, n) = (cfg.conv_kernel_v2 as u64, cfg.d_state as u64);
    let branch = linear(rows, c, half, true) + conv(rows, half, k) + rows * half;
    norm(rows, c)
        + 2 * branch
        + dirs * ssm(rows, half, n)
        + (dirs - 1) * rows * half
        + linear(rows, c, c, true)
        + rows * c
}

fn bimamba(rows: u64, c: u64, dirs: u64, cfg: &LayerConfig) -> u64 {
    let di = cfg.expand_v1 as u64 * c;
    let (k, n) = (cfg.conv_kernel_v1 as u64, cfg.d_state as u64);
    let direction = conv(rows, di, k) + rows * di + ssm(rows, di, n);
    norm(rows, c)
        + linear(rows, c, 2 * di, false)
        + dirs * direction
        + (dirs - 1) * rows * di
        + 2 * rows * di
        + linear(rows, di, c, false)
        + rows * c
}

fn transformer(batch: u64, len: u64, c: u64, cfg: &LayerConfig) -> u64 {
    let rows = batch * len;
    let heads = cfg.heads(c as usize) as u64;
    let hidden = cfg.mlp_ratio as u64 * c;
    norm(rows, c)
        + linear(rows, c, 3 * c, true)
        + attention(batch, len, c, heads)
        + linear(rows, c, c, true)
        + rows * c
        + norm(rows, c)
        + linear(rows, c, hidden, true)
        + rows * hidden
        + linear(rows, hidden, c, true)
        + rows * c
}

/// Forward FLOPs of one layer of `kind` on a `[batch, len, width]` input.
pub fn flops(kind: LayerKind, batch: usize, len: usize, width: usize, cfg: &LayerConfig) -> u64 {
    let (b, l, c) = (batch as u64, len as u64, width as u64);
    let rows = b * l;
    let mix = norm(rows, c) + linear(rows, c, c, true) + rows * c;
    match kind {
        LayerKind::BiMambaV2 => bimamba_v2(rows, c, 2, cfg),
        LayerKind::BiMamba => bimamba(rows, c, 2, cfg),
        LayerKind::Mamba => bimamba(rows, c, 1, cfg),
        LayerKind::Transformer => transformer(b, l, c, cfg),
        LayerKind::GroupV1 => bimamba_v2(rows, c / 2, 2, cfg) + transformer(b, l, c / 2, cfg) + mix,
        LayerKind::GroupV2 => 2 * bimamba_v2(rows, c / 4, 1, cfg) + 2 * transformer(b, l, c / 4, cfg) + mix,
    }
}
