use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use maskmamba_core::backbone::assemble;
use maskmamba_core::mim::{StepMetrics, Trainer};
use maskmamba_core::{Error, Float, Precision};

use crate::checkpoint::{peek_precision, Checkpoint};
use crate::config::RunConfig;
use crate::data;
use crate::error::{CliError, Result};
use crate::lock::DirLock;

pub const CHECKPOINT_NAME: &str = "checkpoint.mmck";
pub const DIVERGED_NAME: &str = "diverged.mmck";
pub const METRICS_NAME: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "step,loss,lr,grad_norm,wall_ms";

#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    /// Continue from a checkpoint; its stored config is used.
    pub resume: Option<PathBuf>,
    /// Stop after this many steps in this invocation (a final checkpoint is
    /// still written).
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub steps_run: u64,
    pub final_step: u64,
    pub last: Option<StepMetrics>,
    pub checkpoint: PathBuf,
}

pub fn run(args: &TrainArgs, log: &mut dyn Write) -> Result<TrainReport> {
    let precision = match (&args.resume, &args.config) {
        (Some(ck), _) => peek_precision(ck)?,
        (None, Some(path)) => RunConfig::load(path)?.precision()?,
        (None, None) => return Err(CliError::Usage("train needs --config or --resume".into())),
    };
    match precision {
        Precision::F32 => run_typed::<f32>(args, log),
        Precision::F64 => run_typed::<f64>(args, log),
    }
}

fn run_typed<T: Float>(args: &TrainArgs, log: &mut dyn Write) -> Result<TrainReport> {
    let _lock = DirLock::acquire(&args.out)?;
    let (cfg, model, mut trainer) = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::<T>::load(path)?;
            let (model, trainer) = ck.trainer()?;
            (ck.config, model, trainer)
        }
        None => {
            let cfg = RunConfig::load(args.config.as_deref().expect("checked by run"))?;
            let (model, layout) = assemble(&cfg.model)?;
            let trainer = Trainer::<T>::new(&layout, cfg.train.clone(), cfg.seed)?;
            (cfg, model, trainer)
        }
    };
    let inputs = data::load(&cfg)?;
    let sched = cfg.train.schedule(inputs.data.len());
    let metrics_path = args.out.join(METRICS_NAME);
    let mut metrics = open_metrics(&metrics_path, trainer.step, args.resume.is_some())?;
    let ck_path = args.out.join(CHECKPOINT_NAME);
    let save = |t: &Trainer<T>, path: &Path| Checkpoint::from_trainer(&cfg, t).save(path);

    let _ = writeln!(
        log,
        "training {} examples, steps {}..{}, peak lr {:.3e}, {} parameters",
        inputs.data.len(),
        trainer.step,
        sched.total,
        sched.peak,
        trainer.params.num_elements()
    );
    let mut steps_run = 0;
    let mut last = None;
    while trainer.step < sched.total && args.stop_after.is_none_or(|n| steps_run < n) {
        let t0 = Instant::now();
        let m = match trainer.step_on(&model, &inputs.data, inputs.embedder()) {
            Ok(m) => m,
            Err(e @ Error::Diverged { .. }) => {
                let path = args.out.join(DIVERGED_NAME);
                save(&trainer, &path)?;
                let _ = writeln!(log, "{e}; state saved to {}", path.display());
                return Err(e.into());
            }
            Err(e) => return Err(e.into()),
        };
        let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
        writeln!(metrics, "{},{},{},{},{:.3}", m.step, m.loss, m.lr, m.grad_norm, wall_ms)
            .map_err(|e| CliError::io(&metrics_path, e))?;
        steps_run += 1;
        last = Some(m);
        if cfg.output.log_every > 0 && trainer.step % cfg.output.log_every == 0 {
            let _ =
                writeln!(log, "step {:>6}  loss {:.4}  lr {:.3e}  grad_norm {:.3}", m.step, m.loss, m.lr, m.grad_norm);
        }
        if cfg.output.checkpoint_every > 0 && trainer.step % cfg.output.checkpoint_every == 0 {
            save(&trainer, &ck_path)?;
        }
    }
    metrics.flush().map_err(|e| CliError::io(&metrics_path, e))?;
    save(&trainer, &ck_path)?;
    let _ = writeln!(log, "stopped at step {}; checkpoint {}", trainer.step, ck_path.display());
    Ok(TrainReport { steps_run, final_step: trainer.step, last, checkpoint: ck_path })
}

/// Opens the metrics CSV. On resume, rows at or past `step` are dropped so
/// the file holds exactly one row per executed step.
fn open_metrics(path: &Path, step: u64, resume: bool) -> Result<std::io::BufWriter<std::fs::File>> {
    let mut text = format!("{METRICS_HEADER}\n");
    if resume {
        if let Ok(old) = std::fs::read_to_string(path) {
            for line in old.lines().skip(1) {
                let row_step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
                if row_step.is_some_and(|s| s < step) {
                    text.push_str(line);
                    text.push('\n');
                }
            }
        }
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))?;
    let f = std::fs::OpenOptions::new().append(true).open(path).map_err(|e| CliError::io(path, e))?;
    Ok(std::io::BufWriter::new(f))
}
