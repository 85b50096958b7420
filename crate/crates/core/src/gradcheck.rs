//! Central finite-difference gradient checks in 64-bit.

use crate::error::Result;
use crate::ops::{Eager, Ops};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor for relative error, so that near-zero gradients are
/// compared on an absolute scale.
pub const FLOOR: f64 = 1e-3;

/// A scalar-valued function of parameters and inputs, evaluable on any [`Ops`].
pub trait ScalarFn {
    fn eval<O: Ops<f64>>(&self, ops: &mut O, inputs: &[O::V]) -> Result<O::V>;
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }

    fn observe(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_empty() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = format!("{} (analytic {analytic:.6e}, numeric {numeric:.6e})", what());
        }
    }
}

fn eval_eager<F: ScalarFn>(f: &F, store: &ParamStore<f64>, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut ops = Eager::new(store);
    let vs = inputs.iter().map(|t| ops.constant(t.clone())).collect::<Result<Vec<_>>>()?;
    Ok(f.eval(&mut ops, &vs)?.data()[0])
}

fn indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        (0..max).map(|i| i * (len - 1) / (max - 1)).collect()
    }
}

/// Compares tape gradients with central differences for every parameter and
/// input. At most `max_per_tensor` evenly spaced entries are probed per tensor.
pub fn check<F: ScalarFn>(
    f: &F,
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    max_per_tensor: usize,
) -> Result<GradReport> {
    let mut tape = Tape::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = f.eval(&mut tape, &vars)?;
    tape.backward(loss)?;
    let input_grads: Vec<Option<Vec<f64>>> = vars.iter().map(|v| tape.grad(*v).map(<[f64]>::to_vec)).collect();
    let param_grads = tape.into_param_grads();

    let mut report = GradReport::default();
    let mut probe = store.clone();
    for id in store.ids() {
        let len = store.get(id).len();
        for i in indices(len, max_per_tensor) {
            let base = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = base + STEP;
            let lp = eval_eager(f, &probe, inputs)?;
            probe.get_mut(id).data_mut()[i] = base - STEP;
            let lm = eval_eager(f, &probe, inputs)?;
            probe.get_mut(id).data_mut()[i] = base;
            let numeric = (lp - lm) / (2.0 * STEP);
            let analytic = param_grads.get(id).map_or(0.0, |g| g[i]);
            report.observe(|| format!("{}[{i}]", store.name(id)), analytic, numeric);
        }
    }
    let mut probe_inputs = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        for i in indices(t.len(), max_per_tensor) {
            let base = t.data()[i];
            probe_inputs[k].data_mut()[i] = base + STEP;
            let lp = eval_eager(f, store, &probe_inputs)?;
            probe_inputs[k].data_mut()[i] = base - STEP;
            let lm = eval_eager(f, store, &probe_inputs)?;
            probe_inputs[k].data_mut()[i] = base;
            let numeric = (lp - lm) / (2.0 * STEP);
            let analytic = input_grads[k].as_ref().map_or(0.0, |g| g[i]);
            report.observe(|| format!("input{k}[{i}]"), analytic, numeric);
        }
    }
    Ok(report)
}

/// `sum(y ∘ r)` for a fixed pseudo-random `r`, turning any tensor into a
/// scalar whose gradient exercises every output entry differently.
pub fn project<O: Ops<f64>>(ops: &mut O, y: &O::V, seed: u64) -> Result<O::V> {
    let shape = ops.shape(y);
    let n: usize = shape.iter().product();
    let r: Vec<f64> = (0..n)
        .map(|i| {
            let x =
                (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(seed.wrapping_mul(0xBF58_476D_1CE4_E5B9));
            ((x >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect();
    let r = ops.constant(Tensor::from_vec(&shape, r)?)?;
    let prod = ops.mul(y, &r)?;
    ops.sum(&prod)
}
