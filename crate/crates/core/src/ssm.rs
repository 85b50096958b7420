//! Selective state-space scan.
//!
//! Per inner channel `d` and state index `n`, with `A = -exp(a_log)`:
//!
//! ```text
//! Ā_t = exp(Δ_t · A)        B̄_t = Δ_t · B_t
//! h_t = Ā_t ∘ h_{t-1} + B̄_t · u_t
//! y_t = <C_t, h_t> + D ∘ u_t
//! ```
//!
//! `Δ`, `B` and `C` are computed per token from one shared projection of the
//! input. Two kernels evaluate the recurrence: a left-to-right loop and a
//! Blelloch scan over the affine maps `h ↦ Ā·h + B̄·u`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alloc::try_alloc;
use crate::error::{Error, Result};
use crate::float::Float;
use crate::functional::ScanDims;
use crate::ops::{Eager, Ops};
use crate::params::{Init, ParamBuilder, ParamId, ParamLayout, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_D_STATE: usize = 16;
pub const DT_MIN: f64 = 1e-3;
pub const DT_MAX: f64 = 1e-1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanKernel {
    #[default]
    Sequential,
    Parallel,
}

/// Rank of the low-rank Δ projection.
pub fn dt_rank(d_inner: usize) -> usize {
    d_inner.div_ceil(16).max(1)
}

/// Parameter handles for one SSM.
#[derive(Debug, Clone, Copy)]
pub struct SsmIds {
    pub d_inner: usize,
    pub d_state: usize,
    pub dt_rank: usize,
    /// `[d_inner, dt_rank + 2·d_state]`, producing `(pre-Δ low rank, B, C)`.
    pub w_x: ParamId,
    /// `[dt_rank, d_inner]`.
    pub w_dt: ParamId,
    pub dt_bias: ParamId,
    pub a_log: ParamId,
    pub d_skip: ParamId,
}

impl SsmIds {
    pub fn register(b: &mut ParamBuilder<'_>, d_inner: usize, d_state: usize) -> Self {
        let r = dt_rank(d_inner);
        let w_x = b.add("x_proj", &[d_inner, r + 2 * d_state], Init::Normal(0.02), true);
        let std = (r as f64).powf(-0.5);
        let w_dt = b.add("dt_proj", &[r, d_inner], Init::Uniform(-std, std), true);
        let dt_bias = b.add("dt_bias", &[d_inner], Init::InvSoftplusLogUniform { min: DT_MIN, max: DT_MAX }, false);
        let a_log = b.add("a_log", &[d_inner, d_state], Init::S4dRealLog, false);
        let d_skip = b.add("d_skip", &[d_inner], Init::Ones, false);
        Self { d_inner, d_state, dt_rank: r, w_x, w_dt, dt_bias, a_log, d_skip }
    }
}

/// Selective SSM over `u: [B, L, d_inner]`, recorded through `ops`.
pub fn ssm_forward<T: Float, O: Ops<T>>(ops: &mut O, ids: &SsmIds, u: &O::V, kernel: ScanKernel) -> Result<O::V> {
    let w_x = ops.param(ids.w_x)?;
    let xp = ops.linear(u, &w_x, None)?;
    let mut parts = ops.split(&xp, 2, &[ids.dt_rank, ids.d_state, ids.d_state])?;
    let c = parts.pop().expect("three parts");
    let b = parts.pop().expect("three parts");
    let low = parts.pop().expect("three parts");
    let w_dt = ops.param(ids.w_dt)?;
    let dt_bias = ops.param(ids.dt_bias)?;
    let pre = ops.linear(&low, &w_dt, Some(&dt_bias))?;
    let delta = ops.softplus(&pre)?;
    let a_log = ops.param(ids.a_log)?;
    let d_skip = ops.param(ids.d_skip)?;
    ops.selective_scan(u, &delta, &a_log, &b, &c, &d_skip, kernel)
}

/// A standalone SSM with its own parameters.
#[derive(Debug, Clone)]
pub struct SsmParams<T: Float> {
    pub store: ParamStore<T>,
    pub ids: SsmIds,
}

impl<T: Float> SsmParams<T> {
    pub fn new(d_inner: usize, d_state: usize, rng: &mut impl Rng) -> Self {
        let mut layout = ParamLayout::new();
        let ids = SsmIds::register(&mut layout.root(), d_inner, d_state);
        Self { store: layout.materialize(rng), ids }
    }

    pub fn a_log(&self) -> &Tensor<T> {
        self.store.get(self.ids.a_log)
    }

    pub fn d_skip(&self) -> &Tensor<T> {
        self.store.get(self.ids.d_skip)
    }

    pub fn dt_bias(&self) -> &Tensor<T> {
        self.store.get(self.ids.dt_bias)
    }

    /// Effective state matrix `A = -exp(a_log)`.
    pub fn a(&self) -> Tensor<T> {
        self.a_log().map(|v| -v.exp())
    }

    fn run(&self, u: &Tensor<T>, kernel: ScanKernel) -> Result<Tensor<T>> {
        let mut ops = Eager::new(&self.store);
        let u = ops.constant(u.clone())?;
        Ok(ssm_forward(&mut ops, &self.ids, &u, kernel)?.into_tensor())
    }
}

/// Forward (left-to-right) selective scan.
pub fn scan_sequential<T: Float>(u: &Tensor<T>, p: &SsmParams<T>) -> Result<Tensor<T>> {
    p.run(u, ScanKernel::Sequential)
}

/// Same contract as [`scan_sequential`], evaluated with an associative scan.
pub fn scan_parallel<T: Float>(u: &Tensor<T>, p: &SsmParams<T>) -> Result<Tensor<T>> {
    p.run(u, ScanKernel::Parallel)
}

/// Right-to-left scan: `flip(scan_sequential(flip(u)))` along the sequence.
pub fn scan_backward<T: Float>(u: &Tensor<T>, p: &SsmParams<T>) -> Result<Tensor<T>> {
    let flipped = crate::functional::flip(u, 1)?;
    crate::functional::flip(&scan_sequential(&flipped, p)?, 1)
}

/// `(Ā, B̄) = (exp(Δ·A), Δ·B)` for `delta: [L, D]`, `a: [D, N]`, `b: [L, N]`.
///
/// Both outputs have shape `[L, D, N]`.
pub fn discretize<T: Float>(delta: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (&[l, d], &[da, n], &[lb, nb]) = (delta.shape(), a.shape(), b.shape()) else {
        return Err(Error::shape("discretize", delta.shape(), a.shape()));
    };
    if da != d || lb != l || nb != n {
        return Err(Error::shape("discretize", delta.shape(), b.shape()));
    }
    if let Some(bad) = delta.data().iter().find(|v| !(**v > T::ZERO)) {
        return Err(Error::invalid("discretize", format!("step size must be positive, got {bad}")));
    }
    let mut abar = Vec::with_capacity(l * d * n);
    let mut bbar = Vec::with_capacity(l * d * n);
    for t in 0..l {
        for di in 0..d {
            let dt = delta.data()[t * d + di];
            for ni in 0..n {
                abar.push(discrete_a(dt, a.data()[di * n + ni]));
                bbar.push(dt * b.data()[t * n + ni]);
            }
        }
    }
    Ok((Tensor::from_vec(&[l, d, n], abar)?, Tensor::from_vec(&[l, d, n], bbar)?))
}

#[inline]
fn discrete_a<T: Float>(delta: T, a: T) -> T {
    (delta * a).exp()
}

/// Affine map `h ↦ a·h + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMap<T> {
    pub a: T,
    pub b: T,
}

impl<T: Float> AffineMap<T> {
    pub const IDENTITY: Self = Self { a: T::ONE, b: T::ZERO };

    pub fn apply(self, h: T) -> T {
        self.a * h + self.b
    }

    /// `self ∘ inner`: apply `inner` first.
    pub fn compose(self, inner: Self) -> Self {
        Self { a: self.a * inner.a, b: self.a * inner.b + self.b }
    }
}

/// Hidden state `h: [d_inner, d_state]` of a single sequence.
#[derive(Debug, Clone)]
pub struct ScanState<T> {
    pub h: Vec<T>,
    d_state: usize,
}

impl<T: Float> ScanState<T> {
    pub fn new(d_inner: usize, d_state: usize) -> Self {
        Self { h: vec![T::ZERO; d_inner * d_state], d_state }
    }

    /// Advances one position and writes `y_t` into `y`.
    ///
    /// `u, delta, y: [D]`, `a: [D, N]`, `b, c: [N]`.
    #[allow(clippy::too_many_arguments)]
    #[inline]
    pub fn step(&mut self, u: &[T], delta: &[T], a: &[T], b: &[T], c: &[T], d_skip: &[T], y: &mut [T]) {
        let n = self.d_state;
        for (di, hd) in self.h.chunks_exact_mut(n).enumerate() {
            let (dt, ut) = (delta[di], u[di]);
            let ad = &a[di * n..(di + 1) * n];
            let mut acc = T::ZERO;
            for ni in 0..n {
                let h = discrete_a(dt, ad[ni]) * hd[ni] + dt * b[ni] * ut;
                hd[ni] = h;
                acc += c[ni] * h;
            }
            y[di] = acc + d_skip[di] * ut;
        }
    }
}

/// Flat views over the inputs of one scan call.
///
/// `u, delta: [B, L, D]`, `a: [D, N]` (already negative), `b, c: [B, L, N]`,
/// `d_skip: [D]`.
#[derive(Debug, Clone, Copy)]
pub struct ScanInputs<'a, T> {
    pub dims: ScanDims,
    pub u: &'a [T],
    pub delta: &'a [T],
    pub a: &'a [T],
    pub b: &'a [T],
    pub c: &'a [T],
    pub d_skip: &'a [T],
}

pub fn scan_sequential_core<T: Float>(x: &ScanInputs<'_, T>) -> Result<Vec<T>> {
    let ScanDims { batch, len, d_inner: d, d_state: n } = x.dims;
    let mut y = try_alloc(batch * len * d)?;
    for bi in 0..batch {
        let mut state = ScanState::new(d, n);
        for t in 0..len {
            let row = bi * len + t;
            state.step(
                &x.u[row * d..(row + 1) * d],
                &x.delta[row * d..(row + 1) * d],
                x.a,
                &x.b[row * n..(row + 1) * n],
                &x.c[row * n..(row + 1) * n],
                x.d_skip,
                &mut y[row * d..(row + 1) * d],
            );
        }
    }
    Ok(y)
}

/// Work-efficient exclusive scan, then one combine for the inclusive value.
fn blelloch_lane<T: Float>(maps: &mut [AffineMap<T>], elems: &[AffineMap<T>], out: &mut [T]) {
    let p = maps.len();
    let mut half = 1;
    while half < p {
        let stride = 2 * half;
        for i in (stride - 1..p).step_by(stride) {
            maps[i] = maps[i].compose(maps[i - half]);
        }
        half = stride;
    }
    maps[p - 1] = AffineMap::IDENTITY;
    while half > 1 {
        let stride = half;
        half /= 2;
        for i in (stride - 1..p).step_by(stride) {
            let left = maps[i - half];
            maps[i - half] = maps[i];
            maps[i] = left.compose(maps[i]);
        }
    }
    for (t, o) in out.iter_mut().enumerate() {
        *o = elems[t].compose(maps[t]).b;
    }
}

pub fn scan_parallel_core<T: Float>(x: &ScanInputs<'_, T>) -> Result<Vec<T>> {
    let ScanDims { batch, len, d_inner: d, d_state: n } = x.dims;
    if len == 0 {
        return Ok(Vec::new());
    }
    let p = len.next_power_of_two();
    // hs: [B, D, N, L]
    let mut hs: Vec<T> = try_alloc(batch * d * n * len)?;
    hs.par_chunks_mut(len).enumerate().for_each_init(
        || (vec![AffineMap::IDENTITY; p], Vec::with_capacity(len)),
        |(maps, elems), (lane, out)| {
            let (bi, dn) = (lane / (d * n), lane % (d * n));
            let (di, ni) = (dn / n, dn % n);
            elems.clear();
            for t in 0..len {
                let row = bi * len + t;
                let dt = x.delta[row * d + di];
                elems.push(AffineMap {
                    a: discrete_a(dt, x.a[di * n + ni]),
                    b: dt * x.b[row * n + ni] * x.u[row * d + di],
                });
            }
            maps[..len].copy_from_slice(elems);
            maps[len..].fill(AffineMap::IDENTITY);
            blelloch_lane(maps, elems, out);
        },
    );
    let mut y = try_alloc(batch * len * d)?;
    for bi in 0..batch {
        for t in 0..len {
            let row = bi * len + t;
            for di in 0..d {
                let lane0 = (bi * d + di) * n;
                let mut acc = T::ZERO;
                for ni in 0..n {
                    acc += x.c[row * n + ni] * hs[(lane0 + ni) * len + t];
                }
                y[row * d + di] = acc + x.d_skip[di] * x.u[row * d + di];
            }
        }
    }
    Ok(y)
}

/// Gradients of a scan w.r.t. each input. `da` is w.r.t. the negative `A`.
#[derive(Debug, Clone)]
pub struct ScanGrads<T> {
    pub du: Vec<T>,
    pub ddelta: Vec<T>,
    pub da: Vec<T>,
    pub db: Vec<T>,
    pub dc: Vec<T>,
    pub dd: Vec<T>,
}

/// Reverse-mode adjoint of the recurrence; recomputes and stores every `h_t`.
pub fn scan_core_backward<T: Float>(x: &ScanInputs<'_, T>, dy: &[T]) -> Result<ScanGrads<T>> {
    let ScanDims { batch, len, d_inner: d, d_state: n } = x.dims;
    let dn = d * n;
    let mut g = ScanGrads {
        du: try_alloc(x.u.len())?,
        ddelta: try_alloc(x.delta.len())?,
        da: vec![T::ZERO; dn],
        db: try_alloc(x.b.len())?,
        dc: try_alloc(x.c.len())?,
        dd: vec![T::ZERO; d],
    };
    let mut hs: Vec<T> = try_alloc(len * dn)?;
    let mut gh = vec![T::ZERO; dn];
    for bi in 0..batch {
        let mut h = vec![T::ZERO; dn];
        for t in 0..len {
            let row = bi * len + t;
            for di in 0..d {
                let dt = x.delta[row * d + di];
                let ut = x.u[row * d + di];
                for ni in 0..n {
                    let k = di * n + ni;
                    h[k] = discrete_a(dt, x.a[k]) * h[k] + dt * x.b[row * n + ni] * ut;
                }
            }
            hs[t * dn..(t + 1) * dn].copy_from_slice(&h);
        }
        gh.fill(T::ZERO);
        for t in (0..len).rev() {
            let row = bi * len + t;
            for di in 0..d {
                let gy = dy[row * d + di];
                let dt = x.delta[row * d + di];
                let ut = x.u[row * d + di];
                g.du[row * d + di] += gy * x.d_skip[di];
                g.dd[di] += gy * ut;
                let mut gdt = T::ZERO;
                let mut gu = T::ZERO;
                for ni in 0..n {
                    let k = di * n + ni;
                    let ht = hs[t * dn + k];
                    let hprev = if t > 0 { hs[(t - 1) * dn + k] } else { T::ZERO };
                    g.dc[row * n + ni] += gy * ht;
                    let ghk = gh[k] + gy * x.c[row * n + ni];
                    let abar = discrete_a(dt, x.a[k]);
                    let bt = x.b[row * n + ni];
                    let gabar = ghk * hprev * abar;
                    gdt += gabar * x.a[k] + ghk * bt * ut;
                    g.da[k] += gabar * dt;
                    g.db[row * n + ni] += ghk * dt * ut;
                    gu += ghk * dt * bt;
                    gh[k] = ghk * abar;
                }
                g.ddelta[row * d + di] += gdt;
                g.du[row * d + di] += gu;
            }
        }
    }
    Ok(g)
}
