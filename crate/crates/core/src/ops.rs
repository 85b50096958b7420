//! The op vocabulary shared by inference and training.
//!
//! Layers are written once against [`Ops`]. [`Eager`] evaluates them
//! directly and drops intermediates as soon as they go out of scope;
//! [`crate::tape::Tape`] records them for reverse-mode differentiation.

use std::ops::Deref;

use crate::error::Result;
use crate::float::Float;
use crate::functional as f;
use crate::kernels::{self, ConvMode};
use crate::params::{ParamId, ParamStore};
use crate::ssm::ScanKernel;
use crate::tensor::Tensor;

pub trait Ops<T: Float> {
    type V;

    fn param(&mut self, id: ParamId) -> Result<Self::V>;
    fn constant(&mut self, t: Tensor<T>) -> Result<Self::V>;
    fn value<'v>(&'v self, v: &'v Self::V) -> &'v Tensor<T>;

    fn shape(&self, v: &Self::V) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    fn linear(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>) -> Result<Self::V>;
    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn conv1d(&mut self, x: &Self::V, k: &Self::V, bias: Option<&Self::V>, mode: ConvMode) -> Result<Self::V>;
    fn layer_norm(&mut self, x: &Self::V, gamma: &Self::V, beta: &Self::V) -> Result<Self::V>;
    /// Elementwise sum; `b` may broadcast as a trailing suffix of `a`.
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn scale(&mut self, x: &Self::V, c: f64) -> Result<Self::V>;
    fn silu(&mut self, x: &Self::V) -> Result<Self::V>;
    fn gelu(&mut self, x: &Self::V) -> Result<Self::V>;
    fn softplus(&mut self, x: &Self::V) -> Result<Self::V>;
    /// Softmax over the last axis.
    fn softmax(&mut self, x: &Self::V) -> Result<Self::V>;
    fn concat(&mut self, parts: &[&Self::V], axis: usize) -> Result<Self::V>;
    fn split(&mut self, x: &Self::V, axis: usize, sizes: &[usize]) -> Result<Vec<Self::V>>;
    fn flip(&mut self, x: &Self::V, axis: usize) -> Result<Self::V>;
    fn reshape(&mut self, x: &Self::V, shape: &[usize]) -> Result<Self::V>;
    fn transpose(&mut self, x: &Self::V) -> Result<Self::V>;
    /// Row gather from `table: [V, C]`; output shape is `prefix ++ [C]`.
    fn embedding(&mut self, table: &Self::V, ids: &[usize], prefix: &[usize]) -> Result<Self::V>;
    #[allow(clippy::too_many_arguments)]
    fn selective_scan(
        &mut self,
        u: &Self::V,
        delta: &Self::V,
        a_log: &Self::V,
        b: &Self::V,
        c: &Self::V,
        d_skip: &Self::V,
        kernel: ScanKernel,
    ) -> Result<Self::V>;
    /// Multi-head bidirectional attention over packed `[B, L, 3C]` q|k|v.
    fn attention(&mut self, qkv: &Self::V, heads: usize) -> Result<Self::V>;
    fn sum(&mut self, x: &Self::V) -> Result<Self::V>;
    /// Mean negative log-likelihood over positions where `mask` is set.
    ///
    /// `logits: [..., V]`; `targets` and `mask` index the flattened rows.
    fn masked_cross_entropy(&mut self, logits: &Self::V, targets: &[usize], mask: &[bool]) -> Result<Self::V>;
}

/// Either an owned intermediate or a borrowed parameter.
#[derive(Debug)]
pub enum Value<'a, T: Float> {
    Owned(Tensor<T>),
    Borrowed(&'a Tensor<T>),
}

impl<T: Float> Value<'_, T> {
    pub fn into_tensor(self) -> Tensor<T> {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t.clone(),
        }
    }
}

impl<T: Float> Deref for Value<'_, T> {
    type Target = Tensor<T>;

    fn deref(&self) -> &Tensor<T> {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

/// Direct evaluation without recording.
pub struct Eager<'a, T: Float> {
    store: &'a ParamStore<T>,
}

impl<'a, T: Float> Eager<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self { store }
    }
}

fn own<'a, T: Float>(t: Result<Tensor<T>>) -> Result<Value<'a, T>> {
    t.map(Value::Owned)
}

impl<'a, T: Float> Ops<T> for Eager<'a, T> {
    type V = Value<'a, T>;

    fn param(&mut self, id: ParamId) -> Result<Self::V> {
        Ok(Value::Borrowed(self.store.get(id)))
    }

    fn constant(&mut self, t: Tensor<T>) -> Result<Self::V> {
        Ok(Value::Owned(t))
    }

    fn value<'v>(&'v self, v: &'v Self::V) -> &'v Tensor<T> {
        v
    }

    fn linear(&mut self, x: &Self::V, w: &Self::V, b: Option<&Self::V>) -> Result<Self::V> {
        own(f::linear(x, w, b.map(|b| &**b)))
    }

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        own(f::matmul(a, b))
    }

    fn conv1d(&mut self, x: &Self::V, k: &Self::V, bias: Option<&Self::V>, mode: ConvMode) -> Result<Self::V> {
        own(f::conv1d(x, k, bias.map(|b| &**b), mode))
    }

    fn layer_norm(&mut self, x: &Self::V, gamma: &Self::V, beta: &Self::V) -> Result<Self::V> {
        own(f::layer_norm(x, gamma, beta).map(|(y, _)| y))
    }

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        own(f::add(a, b))
    }

    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        own(f::mul(a, b))
    }

    fn scale(&mut self, x: &Self::V, c: f64) -> Result<Self::V> {
        let c = T::from_f64(c);
        own(f::unary(x, |v| v * c))
    }

    fn silu(&mut self, x: &Self::V) -> Result<Self::V> {
        own(f::unary(x, kernels::silu))
    }

    fn gelu(&mut self, x: &Self::V) -> Result<Self::V> {
        own(f::unary(x, kernels::gelu))
    }

    fn softplus(&mut self, x: &Self::V) -> Result<Self::V> {
        own(f::unary(x, kernels::softplus))
    }

    fn softmax(&mut self, x: &Self::V) -> Result<Self::V> {
        own(f::softmax(x))
    }

    fn concat(&mut self, parts: &[&Self::V], axis: usize) -> Result<Self::V> {
        let refs: Vec<&Tensor<T>> = parts.iter().map(|p| &***p).collect();
        own(f::concat(&refs, axis))
    }

    fn split(&mut self, x: &Self::V, axis: usize, sizes: &[usize]) -> Result<Vec<Self::V>> {
        Ok(f::split(x, axis, sizes)?.into_iter().map(Value::Owned).collect())
    }

    fn flip(&mut self, x: &Self::V, axis: usize) -> Result<Self::V> {
        own(f::flip(x, axis))
    }

    fn reshape(&mut self, x: &Self::V, shape: &[usize]) -> Result<Self::V> {
        own((**x).clone().reshape(shape))
    }

    fn transpose(&mut self, x: &Self::V) -> Result<Self::V> {
        own(f::transpose(x))
    }

    fn embedding(&mut self, table: &Self::V, ids: &[usize], prefix: &[usize]) -> Result<Self::V> {
        own(f::embedding(table, ids, prefix))
    }

    fn selective_scan(
        &mut self,
        u: &Self::V,
        delta: &Self::V,
        a_log: &Self::V,
        b: &Self::V,
        c: &Self::V,
        d_skip: &Self::V,
        kernel: ScanKernel,
    ) -> Result<Self::V> {
        own(f::selective_scan(u, delta, a_log, b, c, d_skip, kernel))
    }

    fn attention(&mut self, qkv: &Self::V, heads: usize) -> Result<Self::V> {
        own(f::attention(qkv, heads, false).map(|(y, _)| y))
    }

    fn sum(&mut self, x: &Self::V) -> Result<Self::V> {
        Ok(Value::Owned(Tensor::scalar(x.data().iter().copied().sum())))
    }

    fn masked_cross_entropy(&mut self, logits: &Self::V, targets: &[usize], mask: &[bool]) -> Result<Self::V> {
        own(f::masked_cross_entropy(logits, targets, mask).map(|(loss, _)| loss))
    }
}
