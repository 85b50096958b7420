//! Named parameter storage.
//!
//! Models are assembled in two phases: layer constructors register
//! parameter shapes and initializers into a [`ParamLayout`] (no memory is
//! touched, so parameter counts of large configs are cheap), then the
//! layout is materialized into a [`ParamStore`] with a seeded generator.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::float::Float;
use crate::tensor::{numel, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Uniform(f64, f64),
    /// `ln(n + 1)` along the last axis, so that `-exp(a_log)` = -1..-N.
    S4dRealLog,
    /// Inverse softplus of log-uniform samples in `[min, max]`.
    InvSoftplusLogUniform {
        min: f64,
        max: f64,
    },
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamLayout {
    specs: Vec<ParamSpec>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn root(&mut self) -> ParamBuilder<'_> {
        ParamBuilder { layout: self, prefix: String::new() }
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn total(&self) -> usize {
        self.specs.iter().map(|s| numel(&s.shape)).sum()
    }

    pub fn materialize<T: Float>(&self, rng: &mut impl Rng) -> ParamStore<T> {
        let mut store = ParamStore::default();
        for spec in &self.specs {
            let t = init_tensor::<T>(&spec.shape, &spec.init, rng);
            store.push(spec.name.clone(), t, spec.decay);
        }
        store
    }
}

fn init_tensor<T: Float>(shape: &[usize], init: &Init, rng: &mut impl Rng) -> Tensor<T> {
    match init {
        Init::Zeros => Tensor::full(shape, T::ZERO),
        Init::Ones => Tensor::full(shape, T::ONE),
        Init::Normal(std) => Tensor::randn(shape, *std, rng),
        Init::Uniform(lo, hi) => Tensor::uniform(shape, *lo, *hi, rng),
        Init::S4dRealLog => {
            let last = *shape.last().unwrap_or(&1);
            let data = (0..numel(shape)).map(|i| T::from_f64(((i % last) as f64 + 1.0).ln())).collect();
            Tensor::from_vec(shape, data).expect("shape matches")
        }
        Init::InvSoftplusLogUniform { min, max } => {
            let dist = Uniform::new(min.ln(), max.ln()).expect("min < max");
            let data = (0..numel(shape))
                .map(|_| {
                    let dt = dist.sample(rng).exp();
                    // softplus^-1(dt) = dt + ln(1 - e^-dt)
                    T::from_f64(dt + (-(-dt).exp_m1()).ln())
                })
                .collect();
            Tensor::from_vec(shape, data).expect("shape matches")
        }
    }
}

/// Registers parameters under a dotted name prefix.
pub struct ParamBuilder<'a> {
    layout: &'a mut ParamLayout,
    prefix: String,
}

impl ParamBuilder<'_> {
    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        ParamBuilder { layout: self.layout, prefix }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, decay: bool) -> ParamId {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        self.layout.specs.push(ParamSpec { name: full, shape: shape.to_vec(), init, decay });
        ParamId(self.layout.specs.len() - 1)
    }

    /// Weight matrix `[fan_in, fan_out]` (decayed) with an optional bias.
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> LinearParams {
        let mut sub = self.sub(name);
        let w = sub.add("weight", &[fan_in, fan_out], Init::Normal(0.02), true);
        let b = bias.then(|| sub.add("bias", &[fan_out], Init::Zeros, false));
        LinearParams { w, b }
    }

    pub fn layer_norm(&mut self, name: &str, width: usize) -> NormParams {
        let mut sub = self.sub(name);
        NormParams {
            gamma: sub.add("gamma", &[width], Init::Ones, false),
            beta: sub.add("beta", &[width], Init::Zeros, false),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

#[derive(Debug, Clone, Copy)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T: Float> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    decay: Vec<bool>,
    index: HashMap<String, usize>,
}

impl<T: Float> ParamStore<T> {
    fn push(&mut self, name: String, t: Tensor<T>, decay: bool) {
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t.with_requires_grad(true));
        self.decay.push(decay);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.decay[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    /// Replaces a parameter's values, keeping its shape.
    pub fn set_data(&mut self, id: ParamId, data: Vec<T>) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if data.len() != t.len() {
            return Err(Error::shape("set_data", t.shape(), &[data.len()]));
        }
        t.data_mut().copy_from_slice(&data);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Adds each `(id, grad)` pair into the matching parameter's gradient.
    pub fn accumulate(&mut self, grads: &ParamGrads<T>) -> Result<()> {
        for (id, g) in &grads.0 {
            self.tensors[id.0].accumulate_grad(g)?;
        }
        Ok(())
    }

    /// Global L2 norm over all present gradients.
    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(Tensor::grad)
            .flat_map(|g| g.iter().map(|v| v.to_f64() * v.to_f64()))
            .sum::<f64>()
            .sqrt()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            decay: self.decay.clone(),
            index: self.index.clone(),
        }
    }
}

/// Parameter gradients extracted from a finished tape.
#[derive(Debug, Clone, Default)]
pub struct ParamGrads<T: Float>(pub Vec<(ParamId, Vec<T>)>);

impl<T: Float> ParamGrads<T> {
    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.0.iter().find(|(p, _)| *p == id).map(|(_, g)| g.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout_counts_without_allocating_and_names_nest() {
        let mut layout = ParamLayout::new();
        let mut root = layout.root();
        let mut blk = root.sub("blocks.0");
        let lin = blk.linear("proj", 4, 3, true);
        assert!(lin.b.is_some());
        assert_eq!(layout.total(), 15);
        let store: ParamStore<f64> = layout.materialize(&mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(store.name(lin.w), "blocks.0.proj.weight");
        assert_eq!(store.find("blocks.0.proj.bias"), lin.b);
        assert_eq!(store.num_elements(), 15);
    }

    #[test]
    fn dt_bias_init_gives_softplus_in_range() {
        let mut layout = ParamLayout::new();
        let id = layout.root().add("dt", &[256], Init::InvSoftplusLogUniform { min: 1e-3, max: 1e-1 }, false);
        let store: ParamStore<f64> = layout.materialize(&mut ChaCha8Rng::seed_from_u64(3));
        for &b in store.get(id).data() {
            let dt = (1.0 + b.exp()).ln();
            assert!((1e-3 - 1e-12..=1e-1 + 1e-12).contains(&dt), "dt {dt}");
        }
    }

    #[test]
    fn s4d_init_is_one_to_n() {
        let mut layout = ParamLayout::new();
        let id = layout.root().add("a_log", &[2, 4], Init::S4dRealLog, false);
        let store: ParamStore<f64> = layout.materialize(&mut ChaCha8Rng::seed_from_u64(0));
        let a: Vec<f64> = store.get(id).data().iter().map(|v| -v.exp()).collect();
        for (i, v) in a.iter().enumerate() {
            assert!((v + ((i % 4) as f64 + 1.0)).abs() < 1e-12);
        }
    }
}
