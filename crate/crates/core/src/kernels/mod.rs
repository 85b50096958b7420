//! Forward and backward kernels on flat row-major buffers.
//!
//! Both the eager executor and the recording tape call into these, so an
//! eager forward and a recorded forward are bit-identical.

mod attention;
mod conv;

pub use attention::{attention_backward, attention_forward, AttentionShape};
pub use conv::{conv1d_backward, conv1d_forward, ConvMode};

use crate::alloc::try_alloc;
use crate::error::{Error, Result};
use crate::float::Float;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `y[rows, cout] = x[rows, cin] · w[cin, cout] (+ b)`.
pub fn linear_forward<T: Float>(
    x: &[T],
    rows: usize,
    cin: usize,
    w: &[T],
    cout: usize,
    b: Option<&[T]>,
) -> Result<Vec<T>> {
    let mut y = try_alloc(rows * cout)?;
    if let Some(b) = b {
        for row in y.chunks_exact_mut(cout) {
            row.copy_from_slice(b);
        }
    }
    let beta = if b.is_some() { T::ONE } else { T::ZERO };
    T::gemm(rows, cin, cout, T::ONE, x, (cin, 1), w, (cout, 1), beta, &mut y, (cout, 1));
    Ok(y)
}

/// Returns `(dx, dw, db)` for [`linear_forward`].
pub fn linear_backward<T: Float>(
    x: &[T],
    rows: usize,
    cin: usize,
    w: &[T],
    cout: usize,
    dy: &[T],
    want_dx: bool,
) -> Result<(Option<Vec<T>>, Vec<T>, Vec<T>)> {
    let dx = if want_dx {
        let mut dx = try_alloc(rows * cin)?;
        // dx = dy · wᵀ
        T::gemm(rows, cout, cin, T::ONE, dy, (cout, 1), w, (1, cout), T::ZERO, &mut dx, (cin, 1));
        Some(dx)
    } else {
        None
    };
    let mut dw = try_alloc(cin * cout)?;
    // dw = xᵀ · dy
    T::gemm(cin, rows, cout, T::ONE, x, (1, cin), dy, (cout, 1), T::ZERO, &mut dw, (cout, 1));
    let mut db = vec![T::ZERO; cout];
    for row in dy.chunks_exact(cout) {
        db.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
    }
    Ok((dx, dw, db))
}

/// Batched `c[batch, m, n] = a[batch, m, k] · b[batch?, k, n]`; `b` is shared
/// across the batch when `b_batched` is false.
#[allow(clippy::too_many_arguments)]
pub fn matmul_forward<T: Float>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
) -> Result<Vec<T>> {
    let mut c = try_alloc(batch * m * n)?;
    for i in 0..batch {
        let bi = if b_batched { &b[i * k * n..(i + 1) * k * n] } else { b };
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            &a[i * m * k..(i + 1) * m * k],
            (k, 1),
            bi,
            (n, 1),
            T::ZERO,
            &mut c[i * m * n..(i + 1) * m * n],
            (n, 1),
        );
    }
    Ok(c)
}

#[allow(clippy::too_many_arguments)]
pub fn matmul_backward<T: Float>(
    a: &[T],
    b: &[T],
    dc: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_batched: bool,
) -> Result<(Vec<T>, Vec<T>)> {
    let mut da = try_alloc(batch * m * k)?;
    let mut db = try_alloc(if b_batched { batch * k * n } else { k * n })?;
    for i in 0..batch {
        let (bs, bo) = if b_batched { (&b[i * k * n..(i + 1) * k * n], i * k * n) } else { (b, 0) };
        let dci = &dc[i * m * n..(i + 1) * m * n];
        T::gemm(m, n, k, T::ONE, dci, (n, 1), bs, (1, n), T::ZERO, &mut da[i * m * k..(i + 1) * m * k], (k, 1));
        let beta = if b_batched || i == 0 { T::ZERO } else { T::ONE };
        T::gemm(
            k,
            m,
            n,
            T::ONE,
            &a[i * m * k..(i + 1) * m * k],
            (1, k),
            dci,
            (n, 1),
            beta,
            &mut db[bo..bo + k * n],
            (n, 1),
        );
    }
    Ok((da, db))
}

/// Per-row statistics saved by [`layer_norm_forward`].
#[derive(Debug, Clone)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm_forward<T: Float>(x: &[T], width: usize, gamma: &[T], beta: &[T]) -> Result<(Vec<T>, NormStats<T>)> {
    let rows = x.len() / width;
    let mut y = try_alloc(x.len())?;
    let mut mean = Vec::with_capacity(rows);
    let mut rstd = Vec::with_capacity(rows);
    let n = T::from_f64(width as f64);
    let eps = T::from_f64(LAYER_NORM_EPS);
    for (xr, yr) in x.chunks_exact(width).zip(y.chunks_exact_mut(width)) {
        let mu = xr.iter().copied().sum::<T>() / n;
        let var = xr.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
        let r = T::ONE / (var + eps).sqrt();
        for i in 0..width {
            yr[i] = (xr[i] - mu) * r * gamma[i] + beta[i];
        }
        mean.push(mu);
        rstd.push(r);
    }
    Ok((y, NormStats { mean, rstd }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Float>(
    x: &[T],
    width: usize,
    gamma: &[T],
    stats: &NormStats<T>,
    dy: &[T],
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let mut dx = try_alloc(x.len())?;
    let mut dgamma = vec![T::ZERO; width];
    let mut dbeta = vec![T::ZERO; width];
    let n = T::from_f64(width as f64);
    let mut xhat = vec![T::ZERO; width];
    let mut dxhat = vec![T::ZERO; width];
    for (r, ((xr, dyr), dxr)) in
        x.chunks_exact(width).zip(dy.chunks_exact(width)).zip(dx.chunks_exact_mut(width)).enumerate()
    {
        let (mu, rs) = (stats.mean[r], stats.rstd[r]);
        let mut sum_d = T::ZERO;
        let mut sum_dx = T::ZERO;
        for i in 0..width {
            xhat[i] = (xr[i] - mu) * rs;
            dxhat[i] = dyr[i] * gamma[i];
            dgamma[i] += dyr[i] * xhat[i];
            dbeta[i] += dyr[i];
            sum_d += dxhat[i];
            sum_dx += dxhat[i] * xhat[i];
        }
        let (md, mdx) = (sum_d / n, sum_dx / n);
        for i in 0..width {
            dxr[i] = rs * (dxhat[i] - md - xhat[i] * mdx);
        }
    }
    Ok((dx, dgamma, dbeta))
}

/// Softmax over contiguous rows of length `width`, stabilized by
/// max-subtraction.
pub fn softmax_rows_inplace<T: Float>(x: &mut [T], width: usize) {
    for row in x.chunks_exact_mut(width) {
        let m = row.iter().copied().fold(row[0], T::max);
        let mut s = T::ZERO;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        let inv = T::ONE / s;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

pub fn softmax_backward<T: Float>(y: &[T], dy: &[T], width: usize) -> Result<Vec<T>> {
    let mut dx = try_alloc(y.len())?;
    for ((yr, dyr), dxr) in y.chunks_exact(width).zip(dy.chunks_exact(width)).zip(dx.chunks_exact_mut(width)) {
        let dot: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for i in 0..width {
            dxr[i] = yr[i] * (dyr[i] - dot);
        }
    }
    Ok(dx)
}

#[inline]
pub fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

#[inline]
pub fn silu<T: Float>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad<T: Float>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::ONE + x * (T::ONE - s))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu<T: Float>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::ONE + t) + half * x * (T::ONE - t * t) * c * (T::ONE + three * a * x * x)
}

/// `ln(1 + e^x)`, accurate for large negative and positive `x`.
#[inline]
pub fn softplus<T: Float>(x: T) -> T {
    if x > T::ZERO {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Validates that every element is finite; used by the recorded path in
/// debug builds.
pub fn check_finite<T: Float>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}
