//! Reverse-mode differentiation over a recorded op list.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and [`Tape::backward`] is a single reverse sweep.
//! Gradients of leaves (parameters and inputs created with [`Tape::input`])
//! accumulate across repeated `backward` calls until [`Tape::zero_grad`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::float::Float;
use crate::functional::{self as f, MatmulDims, ScanDims};
use crate::kernels::{self, AttentionShape, ConvMode, NormStats};
use crate::ops::Ops;
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::ssm::{self, ScanInputs, ScanKernel};
use crate::tensor::{numel, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Stored<T: Float> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T: Float> {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Matmul { a: Var, b: Var, dims: MatmulDims },
    Conv1d { x: Var, k: Var, bias: Option<Var>, mode: ConvMode },
    LayerNorm { x: Var, gamma: Var, beta: Var, stats: NormStats<T> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    Silu { x: Var },
    Gelu { x: Var },
    Softplus { x: Var },
    Softmax { x: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Split { x: Var, axis: usize, offset: usize },
    Flip { x: Var, axis: usize },
    Reshape { x: Var },
    Transpose { x: Var },
    Embedding { table: Var, ids: Vec<usize> },
    Scan { inputs: [Var; 6], dims: ScanDims },
    Attention { qkv: Var, probs: Vec<T>, shape: AttentionShape },
    Sum { x: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<T> },
}

struct Node<T: Float> {
    value: Stored<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<'s, T: Float> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    leaf_grads: HashMap<usize, Vec<T>>,
}

impl<'s, T: Float> Tape<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self { store, nodes: Vec::new(), params: HashMap::new(), leaf_grads: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is tracked.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push_node(Stored::Owned(t), Op::Leaf, true)
    }

    pub fn tensor(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Stored::Owned(t) => t,
            Stored::Param(id) => self.store.get(*id),
        }
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads.get(&v.0).map(Vec::as_slice)
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    /// Gradients of every parameter that took part in the graph.
    pub fn param_grads(&self) -> ParamGrads<T> {
        let mut out: Vec<(ParamId, Vec<T>)> =
            self.params.iter().filter_map(|(id, v)| self.leaf_grads.get(&v.0).map(|g| (*id, g.clone()))).collect();
        out.sort_by_key(|(id, _)| *id);
        ParamGrads(out)
    }

    pub fn into_param_grads(mut self) -> ParamGrads<T> {
        let mut out: Vec<(ParamId, Vec<T>)> =
            self.params.iter().filter_map(|(id, v)| self.leaf_grads.remove(&v.0).map(|g| (*id, g))).collect();
        out.sort_by_key(|(id, _)| *id);
        ParamGrads(out)
    }

    fn push_node(&mut self, value: Stored<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn record(&mut self, op_name: &'static str, t: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        #[cfg(debug_assertions)]
        kernels::check_finite(op_name, t.data())?;
        let _ = op_name;
        let needs = self.needs(inputs);
        Ok(self.push_node(Stored::Owned(t), op, needs))
    }

    /// Propagates `d loss / d node` to every leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.tensor(loss);
        if lt.len() != 1 {
            return Err(Error::invalid("backward", format!("loss must be scalar, got shape {:?}", lt.shape())));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match self.leaf_grads.get_mut(&i) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                    None => {
                        self.leaf_grads.insert(i, g);
                    }
                }
                continue;
            }
            self.backward_node(i, g, &mut grads)?;
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: Vec<T>, grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let mut acc = |v: Var, d: Vec<T>| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&d).for_each(|(a, b)| *a += *b),
                slot => *slot = Some(d),
            }
        };
        let out_shape = self.tensor(Var(i)).shape().to_vec();
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xt, wt) = (self.tensor(*x), self.tensor(*w));
                let (cin, cout) = (wt.shape()[0], wt.shape()[1]);
                let rows = xt.len() / cin.max(1);
                let want_dx = nodes[x.0].needs_grad;
                let (dx, dw, db) = kernels::linear_backward(xt.data(), rows, cin, wt.data(), cout, &g, want_dx)?;
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                acc(*w, dw);
                if let Some(b) = b {
                    acc(*b, db);
                }
            }
            Op::Matmul { a, b, dims } => {
                let (da, db) = kernels::matmul_backward(
                    self.tensor(*a).data(),
                    self.tensor(*b).data(),
                    &g,
                    dims.batch,
                    dims.m,
                    dims.k,
                    dims.n,
                    dims.b_batched,
                )?;
                acc(*a, da);
                acc(*b, db);
            }
            Op::Conv1d { x, k, bias, mode } => {
                let (xt, kt) = (self.tensor(*x), self.tensor(*k));
                let s = xt.shape();
                let (dx, dk, db) =
                    kernels::conv1d_backward(xt.data(), s[0], s[1], s[2], kt.data(), kt.shape()[0], *mode, &g)?;
                acc(*x, dx);
                acc(*k, dk);
                if let Some(b) = bias {
                    acc(*b, db);
                }
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let xt = self.tensor(*x);
                let width = *xt.shape().last().expect("checked in forward");
                let (dx, dg, db) =
                    kernels::layer_norm_backward(xt.data(), width, self.tensor(*gamma).data(), stats, &g)?;
                acc(*x, dx);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::Add { a, b } => {
                let n = self.tensor(*b).len().max(1);
                let mut db = vec![T::ZERO; n];
                for chunk in g.chunks_exact(n) {
                    db.iter_mut().zip(chunk).for_each(|(d, v)| *d += *v);
                }
                acc(*b, db);
                acc(*a, g);
            }
            Op::Mul { a, b } => {
                let (at, bt) = (self.tensor(*a).data(), self.tensor(*b).data());
                acc(*a, g.iter().zip(bt).map(|(&g, &b)| g * b).collect());
                acc(*b, g.iter().zip(at).map(|(&g, &a)| g * a).collect());
            }
            Op::Scale { x, c } => acc(*x, g.iter().map(|&v| v * *c).collect()),
            Op::Silu { x } => acc(*x, pointwise(&g, self.tensor(*x).data(), kernels::silu_grad)),
            Op::Gelu { x } => acc(*x, pointwise(&g, self.tensor(*x).data(), kernels::gelu_grad)),
            Op::Softplus { x } => acc(*x, pointwise(&g, self.tensor(*x).data(), kernels::sigmoid)),
            Op::Softmax { x } => {
                let y = self.tensor(Var(i));
                let w = *out_shape.last().unwrap_or(&1);
                acc(*x, kernels::softmax_backward(y.data(), &g, w.max(1))?);
            }
            Op::Concat { parts, axis } => {
                let sizes: Vec<usize> = parts.iter().map(|p| self.tensor(*p).shape()[*axis]).collect();
                let gt = Tensor::from_vec(&out_shape, g)?;
                for (p, piece) in parts.iter().zip(f::split(&gt, *axis, &sizes)?) {
                    acc(*p, piece.into_data());
                }
            }
            Op::Split { x, axis, offset } => {
                let xs = self.tensor(*x).shape();
                let outer = numel(&xs[..*axis]);
                let inner = numel(&xs[*axis + 1..]);
                let (n, size) = (xs[*axis], out_shape[*axis]);
                let mut dx = vec![T::ZERO; numel(xs)];
                let block = size * inner;
                for o in 0..outer {
                    let dst = o * n * inner + offset * inner;
                    dx[dst..dst + block].copy_from_slice(&g[o * block..(o + 1) * block]);
                }
                acc(*x, dx);
            }
            Op::Flip { x, axis } => {
                let gt = Tensor::from_vec(&out_shape, g)?;
                acc(*x, f::flip(&gt, *axis)?.into_data());
            }
            Op::Reshape { x } => acc(*x, g),
            Op::Transpose { x } => {
                let gt = Tensor::from_vec(&out_shape, g)?;
                acc(*x, f::transpose(&gt)?.into_data());
            }
            Op::Embedding { table, ids } => {
                let ts = self.tensor(*table).shape();
                let c = ts[1];
                let mut dt = vec![T::ZERO; ts[0] * c];
                for (row, &id) in g.chunks_exact(c.max(1)).zip(ids) {
                    dt[id * c..(id + 1) * c].iter_mut().zip(row).for_each(|(d, v)| *d += *v);
                }
                acc(*table, dt);
            }
            Op::Scan { inputs, dims } => {
                let [u, delta, a_log, b, c, d] = *inputs;
                let a = f::negative_exp(self.tensor(a_log).data());
                let x = ScanInputs {
                    dims: *dims,
                    u: self.tensor(u).data(),
                    delta: self.tensor(delta).data(),
                    a: &a,
                    b: self.tensor(b).data(),
                    c: self.tensor(c).data(),
                    d_skip: self.tensor(d).data(),
                };
                let sg = ssm::scan_core_backward(&x, &g)?;
                let da_log = sg.da.iter().zip(&a).map(|(&gd, &av)| gd * av).collect();
                acc(u, sg.du);
                acc(delta, sg.ddelta);
                acc(a_log, da_log);
                acc(b, sg.db);
                acc(c, sg.dc);
                acc(d, sg.dd);
            }
            Op::Attention { qkv, probs, shape } => {
                let d = kernels::attention_backward(self.tensor(*qkv).data(), probs, *shape, &g)?;
                acc(*qkv, d);
            }
            Op::Sum { x } => {
                let n = self.tensor(*x).len();
                acc(*x, vec![g[0]; n]);
            }
            Op::CrossEntropy { logits, targets, mask, probs } => {
                let v = *self.tensor(*logits).shape().last().expect("checked in forward");
                let count = mask.iter().filter(|m| **m).count();
                let scale = g[0] / T::from_f64(count as f64);
                let mut d = vec![T::ZERO; probs.len()];
                for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                    if !m {
                        continue;
                    }
                    let row = &mut d[r * v..(r + 1) * v];
                    row.iter_mut().zip(&probs[r * v..(r + 1) * v]).for_each(|(o, &p)| *o = p * scale);
                    row[t] -= scale;
                }
                acc(*logits, d);
            }
        }
        Ok(())
    }
}

fn pointwise<T: Float>(g: &[T], x: &[T], d: impl Fn(T) -> T) -> Vec<T> {
    g.iter().zip(x).map(|(&g, &x)| g * d(x)).collect()
}

impl<T: Float> Ops<T> for Tape<'_, T> {
    type V = Var;

    fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.params.get(&id) {
            return Ok(*v);
        }
        let v = self.push_node(Stored::Param(id), Op::Leaf, true);
        self.params.insert(id, v);
        Ok(v)
    }

    fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        Ok(self.push_node(Stored::Owned(t), Op::Leaf, false))
    }

    fn value<'v>(&'v self, v: &'v Var) -> &'v Tensor<T> {
        self.tensor(*v)
    }

    fn linear(&mut self, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        let y = f::linear(self.tensor(*x), self.tensor(*w), b.map(|b| self.tensor(*b)))?;
        let mut ins = vec![*x, *w];
        ins.extend(b.copied());
        self.record("linear", y, Op::Linear { x: *x, w: *w, b: b.copied() }, &ins)
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let dims = f::matmul_dims(self.tensor(*a).shape(), self.tensor(*b).shape())?;
        let y = f::matmul(self.tensor(*a), self.tensor(*b))?;
        self.record("matmul", y, Op::Matmul { a: *a, b: *b, dims }, &[*a, *b])
    }

    fn conv1d(&mut self, x: &Var, k: &Var, bias: Option<&Var>, mode: ConvMode) -> Result<Var> {
        let y = f::conv1d(self.tensor(*x), self.tensor(*k), bias.map(|b| self.tensor(*b)), mode)?;
        let mut ins = vec![*x, *k];
        ins.extend(bias.copied());
        self.record("conv1d", y, Op::Conv1d { x: *x, k: *k, bias: bias.copied(), mode }, &ins)
    }

    fn layer_norm(&mut self, x: &Var, gamma: &Var, beta: &Var) -> Result<Var> {
        let (y, stats) = f::layer_norm(self.tensor(*x), self.tensor(*gamma), self.tensor(*beta))?;
        let op = Op::LayerNorm { x: *x, gamma: *gamma, beta: *beta, stats };
        self.record("layer_norm", y, op, &[*x, *gamma, *beta])
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = f::add(self.tensor(*a), self.tensor(*b))?;
        self.record("add", y, Op::Add { a: *a, b: *b }, &[*a, *b])
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let y = f::mul(self.tensor(*a), self.tensor(*b))?;
        self.record("mul", y, Op::Mul { a: *a, b: *b }, &[*a, *b])
    }

    fn scale(&mut self, x: &Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        let y = f::unary(self.tensor(*x), |v| v * c)?;
        self.record("scale", y, Op::Scale { x: *x, c }, &[*x])
    }

    fn silu(&mut self, x: &Var) -> Result<Var> {
        let y = f::unary(self.tensor(*x), kernels::silu)?;
        self.record("silu", y, Op::Silu { x: *x }, &[*x])
    }

    fn gelu(&mut self, x: &Var) -> Result<Var> {
        let y = f::unary(self.tensor(*x), kernels::gelu)?;
        self.record("gelu", y, Op::Gelu { x: *x }, &[*x])
    }

    fn softplus(&mut self, x: &Var) -> Result<Var> {
        let y = f::unary(self.tensor(*x), kernels::softplus)?;
        self.record("softplus", y, Op::Softplus { x: *x }, &[*x])
    }

    fn softmax(&mut self, x: &Var) -> Result<Var> {
        let y = f::softmax(self.tensor(*x))?;
        self.record("softmax", y, Op::Softmax { x: *x }, &[*x])
    }

    fn concat(&mut self, parts: &[&Var], axis: usize) -> Result<Var> {
        let ts: Vec<&Tensor<T>> = parts.iter().map(|p| self.tensor(**p)).collect();
        let y = f::concat(&ts, axis)?;
        let parts: Vec<Var> = parts.iter().map(|p| **p).collect();
        let ins = parts.clone();
        self.record("concat", y, Op::Concat { parts, axis }, &ins)
    }

    fn split(&mut self, x: &Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let pieces = f::split(self.tensor(*x), axis, sizes)?;
        let mut offset = 0;
        let mut out = Vec::with_capacity(pieces.len());
        for (piece, &size) in pieces.into_iter().zip(sizes) {
            out.push(self.record("split", piece, Op::Split { x: *x, axis, offset }, &[*x])?);
            offset += size;
        }
        Ok(out)
    }

    fn flip(&mut self, x: &Var, axis: usize) -> Result<Var> {
        let y = f::flip(self.tensor(*x), axis)?;
        self.record("flip", y, Op::Flip { x: *x, axis }, &[*x])
    }

    fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        let y = self.tensor(*x).clone().reshape(shape)?;
        self.record("reshape", y, Op::Reshape { x: *x }, &[*x])
    }

    fn transpose(&mut self, x: &Var) -> Result<Var> {
        let y = f::transpose(self.tensor(*x))?;
        self.record("transpose", y, Op::Transpose { x: *x }, &[*x])
    }

    fn embedding(&mut self, table: &Var, ids: &[usize], prefix: &[usize]) -> Result<Var> {
        let y = f::embedding(self.tensor(*table), ids, prefix)?;
        let op = Op::Embedding { table: *table, ids: ids.to_vec() };
        self.record("embedding", y, op, &[*table])
    }

    fn selective_scan(
        &mut self,
        u: &Var,
        delta: &Var,
        a_log: &Var,
        b: &Var,
        c: &Var,
        d_skip: &Var,
        kernel: ScanKernel,
    ) -> Result<Var> {
        let t = |v: &Var| self.tensor(*v);
        let dims = f::scan_dims(t(u), t(delta), t(a_log), t(b), t(c), t(d_skip))?;
        let y = f::selective_scan(t(u), t(delta), t(a_log), t(b), t(c), t(d_skip), kernel)?;
        let inputs = [*u, *delta, *a_log, *b, *c, *d_skip];
        self.record("selective_scan", y, Op::Scan { inputs, dims }, &inputs)
    }

    fn attention(&mut self, qkv: &Var, heads: usize) -> Result<Var> {
        let (y, probs) = f::attention(self.tensor(*qkv), heads, true)?;
        let shape = f::attention_shape(self.tensor(*qkv).shape(), heads)?;
        let op = Op::Attention { qkv: *qkv, probs: probs.expect("kept"), shape };
        self.record("attention", y, op, &[*qkv])
    }

    fn sum(&mut self, x: &Var) -> Result<Var> {
        let y = Tensor::scalar(self.tensor(*x).data().iter().copied().sum());
        self.record("sum", y, Op::Sum { x: *x }, &[*x])
    }

    fn masked_cross_entropy(&mut self, logits: &Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (loss, probs) = f::masked_cross_entropy(self.tensor(*logits), targets, mask)?;
        let op = Op::CrossEntropy { logits: *logits, targets: targets.to_vec(), mask: mask.to_vec(), probs };
        self.record("masked_cross_entropy", loss, op, &[*logits])
    }
}
