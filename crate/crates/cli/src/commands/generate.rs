use std::io::Write;
use std::path::PathBuf;

use maskmamba_core::backbone::{Cond, CondKind};
use maskmamba_core::decode::{generate, trace_csv, StepTrace};
use maskmamba_core::image::write_image;
use maskmamba_core::tensor::Tensor;
use maskmamba_core::tokenizer::{decode, Codebook, TokenGrid};
use maskmamba_core::{Float, Precision};

use crate::checkpoint::{peek_precision, Checkpoint};
use crate::data;
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Default)]
pub struct GenerateArgs {
    pub checkpoint: PathBuf,
    pub class: Option<usize>,
    pub caption: Option<String>,
    pub samples: usize,
    pub cfg: Option<f64>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub temperature: Option<f64>,
    pub out: PathBuf,
    pub trace: Option<PathBuf>,
    pub ema: bool,
    pub codebook: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct GenerateReport {
    pub grids: Vec<TokenGrid>,
    pub trace: Vec<StepTrace>,
    pub forward_passes: usize,
    pub images: Vec<PathBuf>,
}

pub fn run(args: &GenerateArgs, log: &mut dyn Write) -> Result<GenerateReport> {
    match peek_precision(&args.checkpoint)? {
        Precision::F32 => run_typed::<f32>(args, log),
        Precision::F64 => run_typed::<f64>(args, log),
    }
}

fn run_typed<T: Float>(args: &GenerateArgs, log: &mut dyn Write) -> Result<GenerateReport> {
    let ck = Checkpoint::<T>::load(&args.checkpoint)?;
    let cfg = &ck.config;
    let (model, params) = ck.model(args.ema)?;
    let n = args.samples.max(1);
    let cond: Cond<T> = match (cfg.model.cond_kind, args.class, &args.caption) {
        (CondKind::Class, Some(c), _) => {
            if c >= cfg.model.n_classes {
                return Err(CliError::Usage(format!(
                    "class id {c} out of range; valid classes are 0..={}",
                    cfg.model.n_classes - 1
                )));
            }
            Cond::class(vec![c; n])
        }
        (CondKind::Class, None, _) => return Err(CliError::Usage("class-conditioned model needs --class".into())),
        (CondKind::Text, _, Some(caption)) => {
            let emb = data::embedder(cfg)?.expect("text model has an embedder");
            let one = emb.embed(caption)?;
            let feats = (0..n).flat_map(|_| one.iter().map(|&v| T::from_f64(v as f64))).collect();
            Cond::text(Tensor::from_vec(&[n, emb.len(), emb.dim()], feats)?)
        }
        (CondKind::Text, _, None) => return Err(CliError::Usage("text-conditioned model needs --caption".into())),
    };
    let mut dc = cfg.decode;
    if let Some(s) = args.cfg {
        dc.cfg_scale = s;
    }
    if let Some(s) = args.steps {
        dc.steps = s;
    }
    if let Some(s) = args.seed {
        dc.seed = s;
    }
    if let Some(t) = args.temperature {
        dc.temperature = t;
    }
    let codebook = match &args.codebook {
        Some(p) => Codebook::load(p)?,
        None => data::codebook(cfg)?,
    };
    if codebook.k() != cfg.model.codebook_size {
        return Err(CliError::Usage(format!(
            "codebook has {} entries, model expects {}",
            codebook.k(),
            cfg.model.codebook_size
        )));
    }
    model.reset_forward_count();
    let (grids, trace) = generate(&model, &params, &cond, &dc)?;
    let forward_passes = model.forward_count();

    std::fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    let ext = if codebook.channels() == 1 { "pgm" } else { "ppm" };
    let mut images = Vec::with_capacity(grids.len());
    for (i, g) in grids.iter().enumerate() {
        let path = args.out.join(format!("sample_{i:03}.{ext}"));
        write_image(&path, &decode(g, &codebook)?)?;
        images.push(path);
    }
    if let Some(path) = &args.trace {
        std::fs::write(path, trace_csv(&trace)).map_err(|e| CliError::io(path, e))?;
    }
    let _ = writeln!(
        log,
        "wrote {} image(s) to {} ({} steps, cfg {}, seed {})",
        images.len(),
        args.out.display(),
        dc.steps,
        dc.cfg_scale,
        dc.seed
    );
    let _ = writeln!(log, "forward passes: {forward_passes}");
    Ok(GenerateReport { grids, trace, forward_passes, images })
}
