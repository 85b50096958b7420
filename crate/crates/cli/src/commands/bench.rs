use std::io::Write;
use std::path::PathBuf;

use maskmamba_core::bench::{resolution_to_len, summary, to_csv, BenchRecord, SweepPlan};
use maskmamba_core::layers::{LayerConfig, LayerKind};
use maskmamba_core::Precision;

use crate::config::default_precision;
use crate::error::{CliError, Result};
use crate::lock::DirLock;

#[derive(Debug, Clone)]
pub struct BenchArgs {
    pub kinds: Vec<LayerKind>,
    pub lens: Vec<usize>,
    pub resolutions: Vec<usize>,
    pub batches: Vec<usize>,
    pub width: usize,
    pub repeats: usize,
    pub precision: Option<Precision>,
    pub out: PathBuf,
    /// Soft cap on fallible allocations, in MiB.
    pub budget_mb: Option<usize>,
}

impl BenchArgs {
    pub fn plan(&self) -> Result<SweepPlan> {
        let lens = match (self.lens.is_empty(), self.resolutions.is_empty()) {
            (false, true) => self.lens.clone(),
            (true, false) => {
                self.resolutions.iter().map(|&r| resolution_to_len(r)).collect::<maskmamba_core::Result<_>>()?
            }
            _ => return Err(CliError::Usage("give exactly one of --L or --resolutions".into())),
        };
        let plan = SweepPlan {
            kinds: self.kinds.clone(),
            lens,
            batches: self.batches.clone(),
            width: self.width,
            repeats: self.repeats,
            precision: match self.precision {
                Some(p) => p,
                None => default_precision()?,
            },
        };
        plan.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(plan)
    }

    pub fn summary_path(&self) -> PathBuf {
        self.out.with_extension("summary.txt")
    }
}

pub fn run(args: &BenchArgs, log: &mut dyn Write) -> Result<Vec<BenchRecord>> {
    let plan = args.plan()?;
    let dir = args.out.parent().filter(|p| !p.as_os_str().is_empty()).map(PathBuf::from).unwrap_or_else(|| ".".into());
    let _lock = DirLock::acquire(&dir)?;
    let budget = args.budget_mb.map(|mb| mb << 20);
    let records = plan.run(&LayerConfig::default(), budget, |r| {
        let _ = writeln!(log, "{}", r.csv_row());
    })?;
    std::fs::write(&args.out, to_csv(&records)).map_err(|e| CliError::io(&args.out, e))?;
    let text = summary(&records);
    let sp = args.summary_path();
    std::fs::write(&sp, &text).map_err(|e| CliError::io(&sp, e))?;
    let _ = write!(log, "{text}");
    Ok(records)
}
