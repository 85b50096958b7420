//! Iterative non-autoregressive decoding with a cosine unmasking schedule
//! and classifier-free guidance.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Cond, Model};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::ops::Eager;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::tokenizer::TokenGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { steps: 20, cfg_scale: 3.0, temperature: 1.0, seed: 0 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || !(self.cfg_scale >= 0.0) || !(self.temperature > 0.0) {
            return Err(Error::Config("decode needs steps >= 1, cfg_scale >= 0 and temperature > 0".into()));
        }
        Ok(())
    }
}

/// Fraction of tokens still masked after step `t` of `total`.
pub fn cosine_keep_fraction(t: usize, total: usize) -> Result<f64> {
    if total == 0 || t > total {
        return Err(Error::Schedule(format!("step {t} outside 0..={total}")));
    }
    Ok(match t {
        0 => 1.0,
        t if t == total => 0.0,
        t => (std::f64::consts::FRAC_PI_2 * t as f64 / total as f64).cos(),
    })
}

/// Tokens committed at each of `steps` steps for a grid of `n` tokens.
///
/// Follows `floor(n · keep(t+1))` tokens remaining, lifted so every step
/// commits at least one.
pub fn plan_schedule(n: usize, steps: usize) -> Result<Vec<usize>> {
    if n == 0 || steps == 0 || steps > n {
        return Err(Error::Schedule(format!("cannot commit {n} tokens in {steps} steps with at least one per step")));
    }
    let mut remaining = n;
    let mut counts = Vec::with_capacity(steps);
    for t in 0..steps {
        let keep = (n as f64 * cosine_keep_fraction(t + 1, steps)?).floor() as usize;
        let target = keep.min(remaining - 1).max(steps - 1 - t);
        counts.push(remaining - target);
        remaining = target;
    }
    Ok(counts)
}

/// `(1 − s)·l_u + s·l_c`.
pub fn cfg_logits<T: Float>(l_u: &Tensor<T>, l_c: &Tensor<T>, s: f64) -> Result<Tensor<T>> {
    if l_u.shape() != l_c.shape() {
        return Err(Error::shape("cfg_logits", l_u.shape(), l_c.shape()));
    }
    let (a, b) = (T::from_f64(1.0 - s), T::from_f64(s));
    let data = l_u.data().iter().zip(l_c.data()).map(|(&u, &c)| a * u + b * c).collect();
    Tensor::from_vec(l_u.shape(), data)
}

/// Committed ids per position for a batch of grids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskState {
    pub batch: usize,
    pub n: usize,
    pub ids: Vec<Option<usize>>,
    pub counts: Vec<usize>,
}

impl MaskState {
    pub fn new(batch: usize, n: usize, steps: usize) -> Result<Self> {
        Ok(Self { batch, n, ids: vec![None; batch * n], counts: plan_schedule(n, steps)? })
    }

    pub fn masked(&self, b: usize) -> usize {
        self.ids[b * self.n..(b + 1) * self.n].iter().filter(|i| i.is_none()).count()
    }

    pub fn committed(&self) -> usize {
        self.ids.iter().filter(|i| i.is_some()).count()
    }

    pub fn tokens(&self, mask_id: usize) -> Vec<usize> {
        self.ids.iter().map(|i| i.unwrap_or(mask_id)).collect()
    }

    pub fn grids(&self, h: usize, w: usize) -> Result<Vec<TokenGrid>> {
        (0..self.batch)
            .map(|b| {
                let ids = self.ids[b * self.n..(b + 1) * self.n]
                    .iter()
                    .map(|i| i.ok_or_else(|| Error::Schedule("grid still has masked positions".into())))
                    .collect::<Result<Vec<_>>>()?;
                TokenGrid::new(ids, h, w)
            })
            .collect()
    }
}

/// One row of the decode trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTrace {
    pub step: usize,
    pub sample: usize,
    pub committed: usize,
    pub min_confidence: f64,
    pub max_confidence: f64,
    /// Highest confidence among candidates left masked (`-inf` if none).
    pub max_rejected: f64,
}

pub fn trace_csv(trace: &[StepTrace]) -> String {
    let mut s = String::from("step,sample,committed,min_confidence,max_confidence,max_rejected\n");
    for r in trace {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.step, r.sample, r.committed, r.min_confidence, r.max_confidence, r.max_rejected
        );
    }
    s
}

/// Guided logits for the current state; one forward when `s = 1`.
pub fn guided_logits<T: Float>(
    model: &Model,
    params: &ParamStore<T>,
    tokens: &[usize],
    cond: &Cond<T>,
    s: f64,
) -> Result<Tensor<T>> {
    let mut ops = Eager::new(params);
    let l_c = model.logits(&mut ops, tokens, cond)?.into_tensor();
    if s == 1.0 {
        return Ok(l_c);
    }
    let l_u = model.logits(&mut ops, tokens, &cond.to_null())?.into_tensor();
    cfg_logits(&l_u, &l_c, s)
}

/// Samples a candidate for every masked position and commits the
/// `counts[t]` most confident per sample.
pub fn decode_step<T: Float>(
    model: &Model,
    params: &ParamStore<T>,
    state: &mut MaskState,
    cond: &Cond<T>,
    t: usize,
    config: &DecodeConfig,
    rng: &mut impl Rng,
) -> Result<Vec<StepTrace>> {
    let quota = *state
        .counts
        .get(t)
        .ok_or_else(|| Error::Schedule(format!("step {t} beyond the {}-step plan", state.counts.len())))?;
    for b in 0..state.batch {
        if state.masked(b) < quota {
            return Err(Error::Schedule(format!(
                "sample {b} has {} masked positions, step {t} needs {quota}",
                state.masked(b)
            )));
        }
    }
    let k = model.config.codebook_size;
    let v = model.config.vocab_size();
    let logits = guided_logits(model, params, &state.tokens(model.config.mask_token_id()), cond, config.cfg_scale)?;
    let mut trace = Vec::with_capacity(state.batch);
    let mut probs = vec![0f64; k];
    for b in 0..state.batch {
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for pos in 0..state.n {
            let slot = b * state.n + pos;
            if state.ids[slot].is_some() {
                continue;
            }
            let row = &logits.data()[slot * v..slot * v + k];
            let max = row.iter().map(|x| x.to_f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, x) in probs.iter_mut().zip(row) {
                *p = ((x.to_f64() - max) / config.temperature).exp();
                z += *p;
            }
            let u: f64 = rng.random::<f64>() * z;
            let mut acc = 0.0;
            let mut id = k - 1;
            for (j, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    id = j;
                    break;
                }
            }
            cands.push((pos, id, probs[id] / z));
        }
        cands.sort_by(|x, y| y.2.total_cmp(&x.2).then(x.0.cmp(&y.0)));
        let (commit, rest) = cands.split_at(quota);
        for &(pos, id, _) in commit {
            state.ids[b * state.n + pos] = Some(id);
        }
        trace.push(StepTrace {
            step: t,
            sample: b,
            committed: state.n - state.masked(b),
            min_confidence: commit.iter().map(|c| c.2).fold(f64::INFINITY, f64::min),
            max_confidence: commit.iter().map(|c| c.2).fold(f64::NEG_INFINITY, f64::max),
            max_rejected: rest.iter().map(|c| c.2).fold(f64::NEG_INFINITY, f64::max),
        });
    }
    Ok(trace)
}

/// Full decode from an all-masked state for every sample in `cond`.
pub fn generate<T: Float>(
    model: &Model,
    params: &ParamStore<T>,
    cond: &Cond<T>,
    config: &DecodeConfig,
) -> Result<(Vec<TokenGrid>, Vec<StepTrace>)> {
    config.validate()?;
    let mc = &model.config;
    let mut state = MaskState::new(cond.batch(), mc.n_image(), config.steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = Vec::new();
    for t in 0..config.steps {
        trace.extend(decode_step(model, params, &mut state, cond, t, config, &mut rng)?);
    }
    Ok((state.grids(mc.grid_h, mc.grid_w)?, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keep_fraction_endpoints() {
        assert_eq!(cosine_keep_fraction(0, 20).unwrap(), 1.0);
        assert_eq!(cosine_keep_fraction(20, 20).unwrap(), 0.0);
        assert!((cosine_keep_fraction(10, 20).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(cosine_keep_fraction(21, 20).is_err());
    }

    #[test]
    fn schedule_small_cases() {
        assert_eq!(plan_schedule(4, 4).unwrap(), vec![1, 1, 1, 1]);
        assert_eq!(plan_schedule(7, 1).unwrap(), vec![7]);
        assert!(plan_schedule(3, 4).is_err());
        let c = plan_schedule(256, 20).unwrap();
        assert_eq!(c.iter().sum::<usize>(), 256);
        assert!(c.iter().all(|&x| x >= 1));
        assert!(c[19] > c[0]);
    }

    #[test]
    fn cfg_arithmetic() {
        let lu = Tensor::from_vec(&[1], vec![0.2f64]).unwrap();
        let lc = Tensor::from_vec(&[1], vec![0.5f64]).unwrap();
        assert!((cfg_logits(&lu, &lc, 3.0).unwrap().data()[0] - 1.1).abs() < 1e-15);
        assert_eq!(cfg_logits(&lu, &lc, 1.0).unwrap(), lc);
        assert_eq!(cfg_logits(&lu, &lc, 0.0).unwrap(), lu);
    }
}
