//! Binary checkpoints: run config, parameters, optional optimizer and EMA
//! state, generator position and step counter. Layout is documented in
//! `docs/formats.md`.

use std::io::{Read, Write};
use std::path::Path;

use maskmamba_core::backbone::{assemble, Model};
use maskmamba_core::mim::{RngState, Trainer};
use maskmamba_core::optim::AdamW;
use maskmamba_core::{Float, ParamStore, Precision};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"MMCK";
pub const VERSION: u32 = 1;

const HAS_OPTIMIZER: u8 = 1;
const HAS_EMA: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T: Float> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Float> {
    pub t: u64,
    pub m: Vec<NamedTensor<T>>,
    pub v: Vec<NamedTensor<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Float> {
    pub config: RunConfig,
    pub step: u64,
    pub rng: RngState,
    pub params: Vec<NamedTensor<T>>,
    pub optimizer: Option<OptimizerState<T>>,
    pub ema: Option<Vec<NamedTensor<T>>>,
}

fn table<T: Float>(store: &ParamStore<T>) -> Vec<NamedTensor<T>> {
    store
        .iter()
        .map(|(_, name, t)| NamedTensor { name: name.to_string(), shape: t.shape().to_vec(), data: t.data().to_vec() })
        .collect()
}

fn moments<T: Float>(store: &ParamStore<T>, bufs: &[Vec<T>]) -> Vec<NamedTensor<T>> {
    store
        .iter()
        .zip(bufs)
        .map(|((_, name, t), b)| NamedTensor { name: name.to_string(), shape: t.shape().to_vec(), data: b.clone() })
        .collect()
}

/// Copies a tensor table into a store with the same names and shapes.
fn fill<T: Float>(store: &mut ParamStore<T>, tensors: &[NamedTensor<T>], what: &str) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(CliError::Checkpoint(format!("{what}: {} tensors, model has {}", tensors.len(), store.len())));
    }
    for nt in tensors {
        let id = store
            .find(&nt.name)
            .ok_or_else(|| CliError::Checkpoint(format!("{what}: unknown tensor '{}'", nt.name)))?;
        if store.get(id).shape() != nt.shape.as_slice() {
            return Err(CliError::Checkpoint(format!(
                "{what}: '{}' has shape {:?}, model expects {:?}",
                nt.name,
                nt.shape,
                store.get(id).shape()
            )));
        }
        store.set_data(id, nt.data.clone())?;
    }
    Ok(())
}

fn buffers<T: Float>(store: &ParamStore<T>, tensors: &[NamedTensor<T>], what: &str) -> Result<Vec<Vec<T>>> {
    let mut scratch = store.clone();
    fill(&mut scratch, tensors, what)?;
    Ok(scratch.ids().map(|id| scratch.get(id).data().to_vec()).collect())
}

impl<T: Float> Checkpoint<T> {
    pub fn from_trainer(config: &RunConfig, trainer: &Trainer<T>) -> Self {
        Self {
            config: config.clone(),
            step: trainer.step,
            rng: RngState::capture(&trainer.rng),
            params: table(&trainer.params),
            optimizer: Some(OptimizerState {
                t: trainer.opt.t,
                m: moments(&trainer.params, &trainer.opt.m),
                v: moments(&trainer.params, &trainer.opt.v),
            }),
            ema: Some(table(&trainer.ema)),
        }
    }

    /// Model structure and a parameter store holding the saved weights (or
    /// the EMA shadow when `use_ema` is set and present).
    pub fn model(&self, use_ema: bool) -> Result<(Model, ParamStore<T>)> {
        let (model, layout) = assemble(&self.config.model)?;
        let mut store = layout.materialize::<T>(&mut ChaCha8Rng::seed_from_u64(0));
        let src = match (&self.ema, use_ema) {
            (Some(e), true) => e,
            (None, true) => return Err(CliError::Checkpoint("no EMA weights stored".into())),
            _ => &self.params,
        };
        fill(&mut store, src, "parameters")?;
        Ok((model, store))
    }

    /// Rebuilds the full training state for bit-identical continuation.
    pub fn trainer(&self) -> Result<(Model, Trainer<T>)> {
        let (model, params) = self.model(false)?;
        let opt_state = self
            .optimizer
            .as_ref()
            .ok_or_else(|| CliError::Checkpoint("no optimizer state stored; cannot resume".into()))?;
        let mut opt = AdamW::new(&params, self.config.train.adamw());
        opt.t = opt_state.t;
        opt.m = buffers(&params, &opt_state.m, "optimizer m")?;
        opt.v = buffers(&params, &opt_state.v, "optimizer v")?;
        let mut ema = params.clone();
        if let Some(e) = &self.ema {
            fill(&mut ema, e, "ema")?;
        }
        let trainer =
            Trainer { config: self.config.train.clone(), params, opt, ema, rng: self.rng.restore(), step: self.step };
        Ok((model, trainer))
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&[T::PRECISION.tag()])?;
        let cfg = self.config.to_toml();
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(cfg.as_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&self.rng.seed)?;
        w.write_all(&self.rng.stream.to_le_bytes())?;
        w.write_all(&self.rng.word_pos.to_le_bytes())?;
        let flags =
            if self.optimizer.is_some() { HAS_OPTIMIZER } else { 0 } | if self.ema.is_some() { HAS_EMA } else { 0 };
        w.write_all(&[flags])?;
        write_table(&mut w, &self.params)?;
        if let Some(o) = &self.optimizer {
            w.write_all(&o.t.to_le_bytes())?;
            write_table(&mut w, &o.m)?;
            write_table(&mut w, &o.v)?;
        }
        if let Some(e) = &self.ema {
            write_table(&mut w, e)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let precision = read_header(&mut r)?;
        if precision != T::PRECISION {
            return Err(CliError::Checkpoint(format!(
                "checkpoint holds {precision:?} tensors, requested {:?}",
                T::PRECISION
            )));
        }
        let cfg_len = read_u32(&mut r)? as usize;
        let cfg_bytes = read_bytes(&mut r, cfg_len)?;
        let text = String::from_utf8(cfg_bytes).map_err(|_| CliError::Checkpoint("config is not UTF-8".into()))?;
        let config = RunConfig::parse(&text)?;
        let step = read_u64(&mut r)?;
        let seed: [u8; 32] = read_bytes(&mut r, 32)?.try_into().unwrap();
        let stream = read_u64(&mut r)?;
        let word_pos = u128::from_le_bytes(read_bytes(&mut r, 16)?.try_into().unwrap());
        let flags = read_bytes(&mut r, 1)?[0];
        if flags & !(HAS_OPTIMIZER | HAS_EMA) != 0 {
            return Err(CliError::Checkpoint(format!("unknown section flags {flags:#04x}")));
        }
        let params = read_table(&mut r)?;
        let optimizer = if flags & HAS_OPTIMIZER != 0 {
            let t = read_u64(&mut r)?;
            Some(OptimizerState { t, m: read_table(&mut r)?, v: read_table(&mut r)? })
        } else {
            None
        };
        let ema = if flags & HAS_EMA != 0 { Some(read_table(&mut r)?) } else { None };
        Ok(Self { config, step, rng: RngState { seed, stream, word_pos }, params, optimizer, ema })
    }

    /// Writes to a temporary sibling and renames, so a crash never leaves a
    /// truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|e| CliError::io(path, e))?;
        std::fs::write(&tmp, buf).map_err(|e| CliError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// Reads only the header and returns the stored tensor precision.
pub fn peek_precision(path: &Path) -> Result<Precision> {
    let mut f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    read_header(&mut f)
}

fn read_header(r: &mut impl Read) -> Result<Precision> {
    let magic = read_bytes(r, 4)?;
    if magic != MAGIC {
        return Err(CliError::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(CliError::Checkpoint(format!("unsupported format version {version} (this build reads {VERSION})")));
    }
    let tag = read_bytes(r, 1)?[0];
    Precision::from_tag(tag).ok_or_else(|| CliError::Checkpoint(format!("unknown precision tag {tag}")))
}

fn write_table<T: Float>(w: &mut impl Write, tensors: &[NamedTensor<T>]) -> std::io::Result<()> {
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    let mut buf = Vec::new();
    for t in tensors {
        w.write_all(&(t.name.len() as u32).to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&[T::PRECISION.tag()])?;
        buf.clear();
        t.data.iter().for_each(|v| v.to_le_bytes_vec(&mut buf));
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_table<T: Float>(r: &mut impl Read) -> Result<Vec<NamedTensor<T>>> {
    let n = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let len = read_u32(r)? as usize;
        let name = String::from_utf8(read_bytes(r, len)?)
            .map_err(|_| CliError::Checkpoint("tensor name is not UTF-8".into()))?;
        let ndim = read_u32(r)? as usize;
        let shape = (0..ndim).map(|_| read_u64(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let tag = read_bytes(r, 1)?[0];
        if Precision::from_tag(tag) != Some(T::PRECISION) {
            return Err(CliError::Checkpoint(format!("tensor '{name}' has precision tag {tag}")));
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes = numel
            .and_then(|n| n.checked_mul(T::PRECISION.byte_width()))
            .ok_or_else(|| CliError::Checkpoint(format!("tensor '{name}' shape overflows")))?;
        let raw = read_bytes(r, bytes)?;
        let data = raw.chunks_exact(T::PRECISION.byte_width()).map(T::from_le_slice).collect();
        out.push(NamedTensor { name, shape, data });
    }
    Ok(out)
}

fn read_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf).map_err(|e| CliError::Checkpoint(e.to_string()))?;
    if buf.len() != n {
        return Err(CliError::Checkpoint("file is truncated".into()));
    }
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_bytes(r, 4)?.try_into().unwrap()))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_bytes(r, 8)?.try_into().unwrap()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use maskmamba_core::backbone::ModelConfig;

    fn tiny() -> RunConfig {
        RunConfig {
            model: ModelConfig {
                n_layers: 2,
                hidden: 8,
                grid_h: 2,
                grid_w: 2,
                codebook_size: 4,
                n_classes: 3,
                ..ModelConfig::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = tiny();
        let (_, layout) = assemble(&cfg.model).unwrap();
        let trainer = Trainer::<f32>::new(&layout, cfg.train.clone(), 3).unwrap();
        let ck = Checkpoint::from_trainer(&cfg, &trainer);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::<f32>::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        let (_, restored) = back.trainer().unwrap();
        assert_eq!(restored.params, trainer.params);
        assert_eq!(RngState::capture(&restored.rng), RngState::capture(&trainer.rng));
    }

    #[test]
    fn bad_version_and_precision_are_explicit_errors() {
        let cfg = tiny();
        let (_, layout) = assemble(&cfg.model).unwrap();
        let trainer = Trainer::<f32>::new(&layout, cfg.train.clone(), 3).unwrap();
        let mut buf = Vec::new();
        Checkpoint::from_trainer(&cfg, &trainer).write_to(&mut buf).unwrap();
        assert!(Checkpoint::<f64>::read_from(buf.as_slice()).unwrap_err().to_string().contains("F32"));
        buf[4] = 9;
        assert!(Checkpoint::<f32>::read_from(buf.as_slice()).unwrap_err().to_string().contains("version 9"));
        assert!(Checkpoint::<f32>::read_from(&buf[..3]).is_err());
    }
}
