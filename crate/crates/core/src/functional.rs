//! Shape-checked forward functions on [`Tensor`]s.
//!
//! These are the single source of forward numerics: the eager executor
//! calls them directly and the tape calls them before recording a backward
//! rule.

use crate::alloc::try_alloc;
use crate::error::{Error, Result};
use crate::float::Float;
use crate::kernels::{self, AttentionShape, ConvMode, NormStats};
use crate::ssm::{self, ScanInputs, ScanKernel};
use crate::tensor::{numel, Tensor};

fn last_dim(op: &'static str, t: &Tensor<impl Float>) -> Result<usize> {
    t.shape().last().copied().ok_or_else(|| Error::invalid(op, "expected at least one dimension"))
}

fn expect_ndim<T: Float>(op: &'static str, t: &Tensor<T>, n: usize) -> Result<()> {
    if t.ndim() != n {
        return Err(Error::invalid(op, format!("expected {n}-d tensor, got shape {:?}", t.shape())));
    }
    Ok(())
}

pub fn linear<T: Float>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    expect_ndim("linear", w, 2)?;
    let cin = last_dim("linear", x)?;
    let (win, cout) = (w.shape()[0], w.shape()[1]);
    if cin != win {
        return Err(Error::shape("linear", x.shape(), w.shape()));
    }
    if let Some(b) = b {
        if b.shape() != [cout] {
            return Err(Error::shape("linear.bias", w.shape(), b.shape()));
        }
    }
    let rows = x.len() / cin.max(1);
    let y = kernels::linear_forward(x.data(), rows, cin, w.data(), cout, b.map(Tensor::data))?;
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = cout;
    Tensor::from_vec(&shape, y)
}

/// Geometry of a (possibly batched) matmul.
#[derive(Debug, Clone, Copy)]
pub struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub b_batched: bool,
}

pub fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    let err = || Error::shape("matmul", a, b);
    let (batch, m, k) = match a {
        [m, k] => (1, *m, *k),
        [bt, m, k] => (*bt, *m, *k),
        _ => return Err(err()),
    };
    let (kb, n, b_batched) = match b {
        [k, n] => (*k, *n, false),
        [bt, k, n] if *bt == batch && a.len() == 3 => (*k, *n, true),
        _ => return Err(err()),
    };
    if kb != k {
        return Err(err());
    }
    Ok(MatmulDims { batch, m, k, n, b_batched })
}

pub fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let d = matmul_dims(a.shape(), b.shape())?;
    let c = kernels::matmul_forward(a.data(), b.data(), d.batch, d.m, d.k, d.n, d.b_batched)?;
    let shape = if a.ndim() == 3 { vec![d.batch, d.m, d.n] } else { vec![d.m, d.n] };
    Tensor::from_vec(&shape, c)
}

pub fn conv1d<T: Float>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    mode: ConvMode,
) -> Result<Tensor<T>> {
    expect_ndim("conv1d", x, 3)?;
    expect_ndim("conv1d.kernel", kernel, 2)?;
    let (b, l, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = kernel.shape()[0];
    if kernel.shape()[1] != c {
        return Err(Error::shape("conv1d", x.shape(), kernel.shape()));
    }
    if let Some(bias) = bias {
        if bias.shape() != [c] {
            return Err(Error::shape("conv1d.bias", x.shape(), bias.shape()));
        }
    }
    let y = kernels::conv1d_forward(x.data(), b, l, c, kernel.data(), k, bias.map(Tensor::data), mode)?;
    Tensor::from_vec(x.shape(), y)
}

pub fn layer_norm<T: Float>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(Tensor<T>, NormStats<T>)> {
    let c = last_dim("layer_norm", x)?;
    if c == 0 || gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    let (y, stats) = kernels::layer_norm_forward(x.data(), c, gamma.data(), beta.data())?;
    Ok((Tensor::from_vec(x.shape(), y)?, stats))
}

/// `true` when `b` broadcasts onto `a` as a trailing-suffix shape.
pub fn is_suffix(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

/// Elementwise sum; `b` may be a trailing suffix of `a`'s shape.
pub fn add<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if !is_suffix(a.shape(), b.shape()) || b.is_empty() && !a.is_empty() {
        return Err(Error::shape("add", a.shape(), b.shape()));
    }
    let mut out = try_alloc(a.len())?;
    let n = b.len();
    for (o, chunk) in out.chunks_exact_mut(n.max(1)).zip(a.data().chunks_exact(n.max(1))) {
        for i in 0..chunk.len() {
            o[i] = chunk[i] + b.data()[i];
        }
    }
    Tensor::from_vec(a.shape(), out)
}

pub fn mul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mul", a.shape(), b.shape()));
    }
    let out = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::from_vec(a.shape(), out)
}

pub fn unary<T: Float>(x: &Tensor<T>, f: impl Fn(T) -> T) -> Result<Tensor<T>> {
    let mut out = try_alloc(x.len())?;
    out.iter_mut().zip(x.data()).for_each(|(o, &v)| *o = f(v));
    Tensor::from_vec(x.shape(), out)
}

pub fn softmax<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let w = last_dim("softmax", x)?;
    let mut data = x.data().to_vec();
    if w > 0 {
        kernels::softmax_rows_inplace(&mut data, w);
    }
    Tensor::from_vec(x.shape(), data)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

pub fn concat<T: Float>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
    if axis >= first.ndim() {
        return Err(Error::invalid("concat", format!("axis {axis} out of range")));
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = 0;
    for p in parts {
        let mut ps = p.shape().to_vec();
        if ps.len() != shape.len() {
            return Err(Error::shape("concat", first.shape(), p.shape()));
        }
        let size = ps[axis];
        ps[axis] = 0;
        let mut expect = shape.clone();
        expect[axis] = 0;
        if ps != expect {
            return Err(Error::shape("concat", first.shape(), p.shape()));
        }
        shape[axis] += size;
    }
    let (outer, _, inner) = axis_split(&shape, axis);
    let mut out = try_alloc(numel(&shape))?;
    let mut pos = 0;
    for o in 0..outer {
        for p in parts {
            let block = p.shape()[axis] * inner;
            out[pos..pos + block].copy_from_slice(&p.data()[o * block..(o + 1) * block]);
            pos += block;
        }
    }
    Tensor::from_vec(&shape, out)
}

pub fn split<T: Float>(x: &Tensor<T>, axis: usize, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    if axis >= x.ndim() || sizes.iter().sum::<usize>() != x.shape()[axis] {
        return Err(Error::shape("split", x.shape(), sizes));
    }
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let mut out = Vec::with_capacity(sizes.len());
    let mut offset = 0;
    for &size in sizes {
        let mut shape = x.shape().to_vec();
        shape[axis] = size;
        let mut data = try_alloc(numel(&shape))?;
        let block = size * inner;
        for o in 0..outer {
            let src = o * n * inner + offset * inner;
            data[o * block..(o + 1) * block].copy_from_slice(&x.data()[src..src + block]);
        }
        offset += size;
        out.push(Tensor::from_vec(&shape, data)?);
    }
    Ok(out)
}

/// Reverses the order of entries along `axis`.
pub fn flip<T: Float>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.ndim() {
        return Err(Error::invalid("flip", format!("axis {axis} out of range")));
    }
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let mut out = try_alloc(x.len())?;
    for o in 0..outer {
        for i in 0..n {
            let src = (o * n + i) * inner;
            let dst = (o * n + (n - 1 - i)) * inner;
            out[dst..dst + inner].copy_from_slice(&x.data()[src..src + inner]);
        }
    }
    Tensor::from_vec(x.shape(), out)
}

/// Transpose of a 2-D tensor.
pub fn transpose<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    expect_ndim("transpose", x, 2)?;
    let (m, n) = (x.shape()[0], x.shape()[1]);
    let mut out = try_alloc(m * n)?;
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = x.data()[i * n + j];
        }
    }
    Tensor::from_vec(&[n, m], out)
}

/// Gathers rows of `table[V, C]`; output shape is `prefix ++ [C]`.
pub fn embedding<T: Float>(table: &Tensor<T>, ids: &[usize], prefix: &[usize]) -> Result<Tensor<T>> {
    expect_ndim("embedding", table, 2)?;
    let (v, c) = (table.shape()[0], table.shape()[1]);
    if numel(prefix) != ids.len() {
        return Err(Error::shape("embedding", prefix, &[ids.len()]));
    }
    let mut out = try_alloc(ids.len() * c)?;
    for (row, &id) in out.chunks_exact_mut(c.max(1)).zip(ids) {
        if id >= v {
            return Err(Error::TokenRange { id, limit: v });
        }
        row.copy_from_slice(&table.data()[id * c..(id + 1) * c]);
    }
    let mut shape = prefix.to_vec();
    shape.push(c);
    Tensor::from_vec(&shape, out)
}

/// Returns the scalar loss and the row softmax used by its gradient.
pub fn masked_cross_entropy<T: Float>(
    logits: &Tensor<T>,
    targets: &[usize],
    mask: &[bool],
) -> Result<(Tensor<T>, Vec<T>)> {
    let v = last_dim("masked_cross_entropy", logits)?;
    let rows = logits.len() / v.max(1);
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::shape("masked_cross_entropy", logits.shape(), &[targets.len(), mask.len()]));
    }
    let count = mask.iter().filter(|m| **m).count();
    if count == 0 {
        return Err(Error::invalid("masked_cross_entropy", "mask selects no positions"));
    }
    let mut probs = logits.data().to_vec();
    kernels::softmax_rows_inplace(&mut probs, v);
    let mut total = 0.0;
    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        if t >= v {
            return Err(Error::TokenRange { id: t, limit: v });
        }
        // log-softmax computed directly from logits for precision
        let row = &logits.data()[r * v..(r + 1) * v];
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b.to_f64()));
        let lse = mx + row.iter().map(|&x| (x.to_f64() - mx).exp()).sum::<f64>().ln();
        total += lse - row[t].to_f64();
    }
    Ok((Tensor::scalar(T::from_f64(total / count as f64)), probs))
}

/// Shape bundle for the selective scan op.
#[derive(Debug, Clone, Copy)]
pub struct ScanDims {
    pub batch: usize,
    pub len: usize,
    pub d_inner: usize,
    pub d_state: usize,
}

pub fn scan_dims<T: Float>(
    u: &Tensor<T>,
    delta: &Tensor<T>,
    a_log: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d_skip: &Tensor<T>,
) -> Result<ScanDims> {
    expect_ndim("selective_scan.u", u, 3)?;
    expect_ndim("selective_scan.a_log", a_log, 2)?;
    let (bt, l, d) = (u.shape()[0], u.shape()[1], u.shape()[2]);
    let n = a_log.shape()[1];
    if delta.shape() != u.shape() {
        return Err(Error::shape("selective_scan.delta", u.shape(), delta.shape()));
    }
    if a_log.shape()[0] != d || d_skip.shape() != [d] {
        return Err(Error::shape("selective_scan.params", u.shape(), a_log.shape()));
    }
    if b.shape() != [bt, l, n] || c.shape() != [bt, l, n] {
        return Err(Error::shape("selective_scan.bc", &[bt, l, n], b.shape()));
    }
    Ok(ScanDims { batch: bt, len: l, d_inner: d, d_state: n })
}

/// `A = -exp(a_log)`.
pub fn negative_exp<T: Float>(a_log: &[T]) -> Vec<T> {
    a_log.iter().map(|&v| -v.exp()).collect()
}

#[allow(clippy::too_many_arguments)]
pub fn selective_scan<T: Float>(
    u: &Tensor<T>,
    delta: &Tensor<T>,
    a_log: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    d_skip: &Tensor<T>,
    kernel: ScanKernel,
) -> Result<Tensor<T>> {
    let dims = scan_dims(u, delta, a_log, b, c, d_skip)?;
    let a = negative_exp(a_log.data());
    let inputs =
        ScanInputs { dims, u: u.data(), delta: delta.data(), a: &a, b: b.data(), c: c.data(), d_skip: d_skip.data() };
    let y = match kernel {
        ScanKernel::Sequential => ssm::scan_sequential_core(&inputs)?,
        ScanKernel::Parallel => ssm::scan_parallel_core(&inputs)?,
    };
    Tensor::from_vec(u.shape(), y)
}

/// Full bidirectional attention over a packed `[B, L, 3C]` projection.
pub fn attention<T: Float>(qkv: &Tensor<T>, heads: usize, keep_probs: bool) -> Result<(Tensor<T>, Option<Vec<T>>)> {
    let s = attention_shape(qkv.shape(), heads)?;
    let (out, probs) = kernels::attention_forward(qkv.data(), s, keep_probs)?;
    Ok((Tensor::from_vec(&[s.batch, s.len, s.width], out)?, probs))
}

pub fn attention_shape(shape: &[usize], heads: usize) -> Result<AttentionShape> {
    match shape {
        [b, l, c3] if c3 % 3 == 0 && heads > 0 && (c3 / 3) % heads == 0 => {
            Ok(AttentionShape { batch: *b, len: *l, width: c3 / 3, heads })
        }
        _ => Err(Error::invalid("attention", format!("packed shape {shape:?} incompatible with {heads} heads"))),
    }
}
