//! Masked-image-modeling training: mask sampling, condition dropout, the
//! learning-rate schedule and the optimizer loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Cond, Model};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::float::Float;
use crate::ops::{Eager, Ops};
use crate::optim::{ema_update, AdamW, AdamWConfig};
use crate::params::{ParamGrads, ParamLayout, ParamStore};
use crate::tape::Tape;
use crate::text::TextEmbedder;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSpec {
    pub ratio_min: f64,
    pub ratio_max: f64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self { ratio_min: 0.5, ratio_max: 1.0 }
    }
}

impl MaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.ratio_min && self.ratio_min <= self.ratio_max && self.ratio_max <= 1.0) {
            return Err(Error::Config(format!(
                "mask ratios need 0 < min <= max <= 1 (got {} and {})",
                self.ratio_min, self.ratio_max
            )));
        }
        Ok(())
    }

    /// Number of masked positions for ratio `m_r`.
    pub fn count(m_r: f64, n_tokens: usize) -> usize {
        ((m_r * n_tokens as f64).round() as usize).clamp(1, n_tokens)
    }
}

/// Draws `m_r ~ U[min, max]` and masks `round(m_r·n)` distinct positions.
pub fn sample_mask(rng: &mut impl Rng, n_tokens: usize, spec: &MaskSpec) -> Vec<bool> {
    let m_r = if spec.ratio_max > spec.ratio_min {
        rng.random_range(spec.ratio_min..=spec.ratio_max)
    } else {
        spec.ratio_min
    };
    let mut mask = vec![false; n_tokens];
    for i in rand::seq::index::sample(rng, n_tokens, MaskSpec::count(m_r, n_tokens)) {
        mask[i] = true;
    }
    mask
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Learning rate per 256 samples; the peak rate is `base_lr · batch / 256`.
    pub base_lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Overrides `epochs` when set.
    pub steps: Option<u64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub cond_dropout: f64,
    pub mask: MaskSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        Self {
            base_lr: 1e-4,
            batch: 32,
            epochs: 300,
            warmup_epochs: 30,
            steps: None,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            ema_decay: 0.999,
            cond_dropout: 0.1,
            mask: MaskSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.mask.validate()?;
        let positive = [self.base_lr, self.batch as f64, self.eps];
        if positive.iter().any(|v| !(*v > 0.0)) || self.steps == Some(0) || (self.steps.is_none() && self.epochs == 0) {
            return Err(Error::Config("base_lr, batch, eps and the run length must be positive".into()));
        }
        let unit = [self.beta1, self.beta2, self.ema_decay, self.cond_dropout];
        if unit.iter().any(|v| !(0.0..=1.0).contains(v)) || self.weight_decay < 0.0 {
            return Err(Error::Config("betas, ema_decay and cond_dropout must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }

    pub fn peak_lr(&self) -> f64 {
        self.base_lr * self.batch as f64 / 256.0
    }

    pub fn schedule(&self, n_examples: usize) -> Schedule {
        let batch = self.batch.min(n_examples.max(1));
        let steps_per_epoch = n_examples.div_ceil(batch).max(1) as u64;
        let total = self.steps.unwrap_or(self.epochs as u64 * steps_per_epoch);
        Schedule {
            peak: self.peak_lr(),
            warmup: (self.warmup_epochs as u64 * steps_per_epoch).min(total),
            total,
            steps_per_epoch,
            batch,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub warmup: u64,
    pub total: u64,
    pub steps_per_epoch: u64,
    pub batch: usize,
}

impl Schedule {
    pub fn lr(&self, step: u64) -> f64 {
        lr_at(step, self.peak, self.warmup, self.total)
    }
}

/// Linear warmup from 0 to `peak`, then cosine decay to 0 at `total`.
pub fn lr_at(step: u64, peak: f64, warmup: u64, total: u64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if step >= total {
        return 0.0;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Exact generator position, restorable bit for bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Masked CE loss and parameter gradients for one batch.
///
/// `targets` holds `B·h·w` ids; masked positions are replaced by the mask
/// token before embedding.
pub fn loss_and_grads<T: Float>(
    model: &Model,
    params: &ParamStore<T>,
    targets: &[usize],
    mask: &[bool],
    cond: &Cond<T>,
) -> Result<(f64, ParamGrads<T>)> {
    let inputs = masked_inputs(model, targets, mask)?;
    let mut tape = Tape::new(params);
    let logits = model.logits(&mut tape, &inputs, cond)?;
    let loss = tape.masked_cross_entropy(&logits, targets, mask)?;
    let value = tape.tensor(loss).data()[0].to_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "masked cross-entropy" });
    }
    tape.backward(loss)?;
    Ok((value, tape.into_param_grads()))
}

fn masked_inputs(model: &Model, targets: &[usize], mask: &[bool]) -> Result<Vec<usize>> {
    if mask.len() != targets.len() {
        return Err(Error::shape("mask", &[targets.len()], &[mask.len()]));
    }
    let m = model.config.mask_token_id();
    Ok(targets.iter().zip(mask).map(|(&t, &k)| if k { m } else { t }).collect())
}

/// Forward-only masked CE.
pub fn masked_loss<T: Float>(
    model: &Model,
    params: &ParamStore<T>,
    targets: &[usize],
    mask: &[bool],
    cond: &Cond<T>,
) -> Result<f64> {
    let inputs = masked_inputs(model, targets, mask)?;
    let mut ops = Eager::new(params);
    let logits = model.logits(&mut ops, &inputs, cond)?;
    let loss = ops.masked_cross_entropy(&logits, targets, mask)?;
    Ok(loss.data()[0].to_f64())
}

/// Mean masked CE over a dataset with masks drawn from `seed`, no dropout.
pub fn eval_loss<T: Float>(
    model: &Model,
    params: &ParamStore<T>,
    data: &Dataset,
    embedder: Option<&dyn TextEmbedder>,
    spec: &MaskSpec,
    seed: u64,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("eval_loss", "empty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = model.config.n_image();
    let mut total = 0.0;
    for chunk in (0..data.len()).collect::<Vec<_>>().chunks(16) {
        let (targets, cond) = data.batch::<T>(chunk, &model.config, embedder)?;
        let mask: Vec<bool> = (0..chunk.len()).flat_map(|_| sample_mask(&mut rng, n, spec)).collect();
        total += masked_loss(model, params, &targets, &mask, &cond)? * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Training state: parameters, optimizer, EMA shadow, generator and step.
///
/// All randomness (initialization, masks, condition dropout, epoch order)
/// flows from the one seeded generator.
#[derive(Debug, Clone)]
pub struct Trainer<T: Float> {
    pub config: TrainConfig,
    pub params: ParamStore<T>,
    pub opt: AdamW<T>,
    pub ema: ParamStore<T>,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

impl<T: Float> Trainer<T> {
    pub fn new(layout: &ParamLayout, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layout.materialize(&mut rng);
        Ok(Self::from_parts(config, params, &mut rng))
    }

    fn from_parts(config: TrainConfig, params: ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        Self {
            opt: AdamW::new(&params, config.adamw()),
            ema: params.clone(),
            config,
            params,
            rng: rng.clone(),
            step: 0,
        }
    }

    /// Example indices for the current step: a fresh permutation per epoch,
    /// drawn on a side stream of the same seed so it is resumable.
    pub fn batch_indices(&self, n_examples: usize) -> Vec<usize> {
        let sched = self.config.schedule(n_examples);
        let epoch = self.step / sched.steps_per_epoch;
        let mut side = ChaCha8Rng::from_seed(self.rng.get_seed());
        side.set_stream(epoch + 1);
        let mut order: Vec<usize> = (0..n_examples).collect();
        order.shuffle(&mut side);
        let start = (self.step % sched.steps_per_epoch) as usize * sched.batch;
        order[start..(start + sched.batch).min(n_examples)].to_vec()
    }

    /// One optimizer step on an explicit batch.
    pub fn train_step(
        &mut self,
        model: &Model,
        targets: &[usize],
        cond: &Cond<T>,
        sched: &Schedule,
    ) -> Result<StepMetrics> {
        let n = model.config.n_image();
        let b = cond.batch();
        if targets.len() != b * n {
            return Err(Error::shape("train_step", &[b, n], &[targets.len()]));
        }
        let mask: Vec<bool> = (0..b).flat_map(|_| sample_mask(&mut self.rng, n, &self.config.mask)).collect();
        let dropped: Vec<bool> = (0..b).map(|_| self.rng.random_bool(self.config.cond_dropout)).collect();
        let cond = cond.clone().with_dropped(dropped);
        let (loss, grads) = loss_and_grads(model, &self.params, targets, &mask, &cond).map_err(|e| match e {
            Error::NonFinite { .. } => Error::Diverged { step: self.step, detail: e.to_string() },
            e => e,
        })?;
        let grad_norm = grads.0.iter().flat_map(|(_, g)| g.iter().map(|v| v.to_f64().powi(2))).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                detail: format!("gradient norm {grad_norm} at loss {loss}"),
            });
        }
        let lr = sched.lr(self.step);
        self.opt.step(&mut self.params, &grads, lr)?;
        ema_update(&mut self.ema, &self.params, self.config.ema_decay)?;
        let metrics = StepMetrics { step: self.step, loss, lr, grad_norm };
        self.step += 1;
        Ok(metrics)
    }

    /// Picks the next batch from `data` and trains on it.
    pub fn step_on(
        &mut self,
        model: &Model,
        data: &Dataset,
        embedder: Option<&dyn TextEmbedder>,
    ) -> Result<StepMetrics> {
        if data.is_empty() {
            return Err(Error::invalid("train", "dataset is empty"));
        }
        let sched = self.config.schedule(data.len());
        let idx = self.batch_indices(data.len());
        let (targets, cond) = data.batch::<T>(&idx, &model.config, embedder)?;
        self.train_step(model, &targets, &cond, &sched)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_counts() {
        assert_eq!(MaskSpec::count(0.55, 256), 141);
        assert_eq!(MaskSpec::count(1.0, 256), 256);
        assert_eq!(MaskSpec::count(0.01, 10), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let full = MaskSpec { ratio_min: 1.0, ratio_max: 1.0 };
        assert!(sample_mask(&mut rng, 256, &full).iter().all(|m| *m));
        assert!(MaskSpec { ratio_min: 0.0, ratio_max: 1.0 }.validate().is_err());
    }

    #[test]
    fn lr_endpoints() {
        let cfg = TrainConfig { batch: 64, steps: Some(100), warmup_epochs: 10, ..TrainConfig::default() };
        let s = cfg.schedule(64);
        assert_eq!(s.warmup, 10);
        assert_eq!(s.lr(0), 0.0);
        assert!((s.lr(10) - 1e-4 * 64.0 / 256.0).abs() < 1e-18);
        assert!(s.lr(100).abs() < 1e-12);
        assert!(s.lr(99) > 0.0 && s.lr(99) < s.lr(50));
    }

    #[test]
    fn rng_state_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let _: u64 = rng.random();
        let _: u32 = rng.random();
        let mut back = RngState::capture(&rng).restore();
        assert_eq!(rng.random::<u64>(), back.random::<u64>());
    }
}
