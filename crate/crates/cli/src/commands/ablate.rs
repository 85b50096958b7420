//! Matched variant sets trained and evaluated on the configured desk-scale
//! task.

use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use maskmamba_core::backbone::{assemble, CondPos, MambaKind, ModelConfig, SchemeKind};
use maskmamba_core::data::{histogram, total_variation, Label};
use maskmamba_core::decode::{generate, DecodeConfig};
use maskmamba_core::mim::{eval_loss, Trainer};
use maskmamba_core::ParamStore;

use crate::config::RunConfig;
use crate::data::{self, Inputs};
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Schemes,
    Backbones,
    CondPos,
    CfgSweep,
    IterSweep,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Schemes, Suite::Backbones, Suite::CondPos, Suite::CfgSweep, Suite::IterSweep];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Schemes => "schemes",
            Suite::Backbones => "backbones",
            Suite::CondPos => "cond_pos",
            Suite::CfgSweep => "cfg_sweep",
            Suite::IterSweep => "iter_sweep",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| {
            let names: Vec<_> = Suite::ALL.iter().map(|x| x.name()).collect();
            CliError::Usage(format!("unknown suite '{s}' (expected one of {})", names.join(", ")))
        })
    }
}

pub const CFG_SCALES: [f64; 5] = [0.0, 1.0, 2.0, 3.0, 4.0];
pub const ITER_STEPS: [usize; 5] = [5, 10, 15, 20, 25];

/// A named model variant, or a decode setting on the shared base model.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub model: ModelConfig,
    pub decode: DecodeConfig,
}

pub fn variants(suite: Suite, base: &RunConfig) -> Vec<Variant> {
    let v = |name: String, model: ModelConfig| Variant { name, model, decode: base.decode };
    let with = |scheme, mamba_kind| ModelConfig { scheme, mamba_kind, ..base.model.clone() };
    match suite {
        Suite::Schemes => [SchemeKind::GroupV1, SchemeKind::GroupV2, SchemeKind::SerialV1, SchemeKind::SerialV2]
            .into_iter()
            .map(|s| v(s.name().to_string(), with(s, base.model.mamba_kind)))
            .collect(),
        Suite::Backbones => vec![
            v("bimamba".into(), with(SchemeKind::PureMamba, MambaKind::Bimamba)),
            v("bimamba_v2".into(), with(SchemeKind::PureMamba, MambaKind::BimambaV2)),
            v("transformer".into(), with(SchemeKind::PureTransformer, base.model.mamba_kind)),
            v("bimamba+transformer".into(), with(SchemeKind::SerialV2, MambaKind::Bimamba)),
            v("bimamba_v2+transformer".into(), with(SchemeKind::SerialV2, MambaKind::BimambaV2)),
        ],
        Suite::CondPos => CondPos::ALL
            .into_iter()
            .map(|p| v(p.name().to_string(), ModelConfig { cond_pos: p, ..base.model.clone() }))
            .collect(),
        Suite::CfgSweep => CFG_SCALES
            .into_iter()
            .map(|s| Variant {
                name: format!("cfg={s}"),
                model: base.model.clone(),
                decode: DecodeConfig { cfg_scale: s, ..base.decode },
            })
            .collect(),
        Suite::IterSweep => ITER_STEPS
            .into_iter()
            .map(|t| Variant {
                name: format!("steps={t}"),
                model: base.model.clone(),
                decode: DecodeConfig { steps: t, ..base.decode },
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub params: usize,
    pub val_loss: f64,
    /// Total-variation distance between generated and training token
    /// frequencies.
    pub gen_tv: f64,
    /// Fraction of generated grids that exactly match their class's
    /// training grid.
    pub exact: f64,
    pub train_s: f64,
}

pub fn format_table(suite: Suite, rows: &[AblationRow]) -> String {
    let mut s = format!(
        "suite {suite}\n{:<24} {:>9} {:>9} {:>7} {:>6} {:>8}\n",
        "variant", "params", "val_ce", "gen_tv", "exact", "train_s"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<24} {:>9} {:>9.4} {:>7.4} {:>6.3} {:>8.1}\n",
            r.variant, r.params, r.val_loss, r.gen_tv, r.exact, r.train_s
        ));
    }
    s
}

struct Trained {
    params: ParamStore<f32>,
    val_loss: f64,
    train_s: f64,
}

fn train(
    cfg: &RunConfig,
    model_cfg: &ModelConfig,
    inputs: &Inputs,
    log: &mut dyn Write,
    name: &str,
) -> Result<Trained> {
    let (model, layout) = assemble(model_cfg)?;
    let mut trainer = Trainer::<f32>::new(&layout, cfg.train.clone(), cfg.seed)?;
    let total = cfg.train.schedule(inputs.data.len()).total;
    let t0 = Instant::now();
    while trainer.step < total {
        trainer.step_on(&model, &inputs.data, inputs.embedder())?;
    }
    let train_s = t0.elapsed().as_secs_f64();
    let val_loss =
        eval_loss(&model, &trainer.params, &inputs.data, inputs.embedder(), &cfg.train.mask, cfg.seed.wrapping_add(1))?;
    let _ = writeln!(log, "  {name}: {total} steps in {train_s:.1}s, val_ce {val_loss:.4}");
    Ok(Trained { params: trainer.params, val_loss, train_s })
}

fn evaluate(
    model_cfg: &ModelConfig,
    trained: &Trained,
    decode: &DecodeConfig,
    inputs: &Inputs,
    name: &str,
) -> Result<AblationRow> {
    let (model, layout) = assemble(model_cfg)?;
    let labels: Vec<&Label> = inputs.data.examples.iter().map(|e| &e.label).collect();
    let cond = maskmamba_core::data::conditions::<f32>(&labels, model_cfg, inputs.embedder())?;
    let (grids, _) = generate(&model, &trained.params, &cond, decode)?;
    let k = model_cfg.codebook_size;
    let gen_tv = total_variation(&histogram(grids.iter(), k), &inputs.data.histogram(k));
    let exact =
        grids.iter().zip(&inputs.data.examples).filter(|(g, e)| **g == e.grid).count() as f64 / grids.len() as f64;
    Ok(AblationRow {
        variant: name.to_string(),
        params: layout.total(),
        val_loss: trained.val_loss,
        gen_tv,
        exact,
        train_s: trained.train_s,
    })
}

#[derive(Debug, Clone)]
pub struct AblateArgs {
    pub suite: Suite,
    pub config: PathBuf,
    pub out: Option<PathBuf>,
}

pub fn run(args: &AblateArgs, log: &mut dyn Write) -> Result<Vec<AblationRow>> {
    let cfg = RunConfig::load(&args.config)?;
    let rows = run_suite(args.suite, &cfg, log)?;
    let table = format_table(args.suite, &rows);
    let _ = write!(log, "{table}");
    if let Some(out) = &args.out {
        std::fs::write(out, &table).map_err(|e| CliError::io(out, e))?;
    }
    Ok(rows)
}

/// Trains each model variant (once for decode sweeps) and reports one row
/// per variant.
pub fn run_suite(suite: Suite, cfg: &RunConfig, log: &mut dyn Write) -> Result<Vec<AblationRow>> {
    let inputs = data::load(cfg)?;
    let vars = variants(suite, cfg);
    let _ = writeln!(log, "ablation {suite}: {} variants", vars.len());
    let mut rows = Vec::with_capacity(vars.len());
    match suite {
        Suite::CfgSweep | Suite::IterSweep => {
            let trained = train(cfg, &cfg.model, &inputs, log, "base")?;
            for v in &vars {
                rows.push(evaluate(&v.model, &trained, &v.decode, &inputs, &v.name)?);
            }
        }
        _ => {
            for v in &vars {
                v.model.validate()?;
                let trained = train(cfg, &v.model, &inputs, log, &v.name)?;
                rows.push(evaluate(&v.model, &trained, &v.decode, &inputs, &v.name)?);
            }
        }
    }
    Ok(rows)
}
