//! Single-layer inference benchmarks: latency and peak memory over
//! sequence length, scaling-exponent fits and crossover detection.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alloc::{measure_peak, with_budget};
use crate::error::{Error, Result};
use crate::float::{Float, Precision};
use crate::layers::{flops::flops, Layer, LayerConfig, LayerKind};
use crate::ops::{Eager, Ops};
use crate::params::ParamLayout;
use crate::tensor::Tensor;

pub const MIN_REPEATS: usize = 5;
pub const WARMUPS: usize = 2;
pub const CSV_HEADER: &str = "kind,L,batch,C,repeats,median_ms,mean_ms,p95_ms,peak_bytes,flops";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Outcome {
    Ok {
        median_ms: f64,
        mean_ms: f64,
        p95_ms: f64,
        peak_bytes: usize,
    },
    /// An allocation of `bytes` was refused.
    OutOfMemory {
        bytes: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRecord {
    pub kind: LayerKind,
    pub len: usize,
    pub batch: usize,
    pub width: usize,
    pub repeats: usize,
    pub flops: u64,
    pub outcome: Outcome,
}

impl BenchRecord {
    pub fn median_ms(&self) -> Option<f64> {
        match self.outcome {
            Outcome::Ok { median_ms, .. } => Some(median_ms),
            Outcome::OutOfMemory { .. } => None,
        }
    }

    pub fn peak_bytes(&self) -> Option<usize> {
        match self.outcome {
            Outcome::Ok { peak_bytes, .. } => Some(peak_bytes),
            Outcome::OutOfMemory { .. } => None,
        }
    }

    /// CSV row; out-of-memory points carry `oom` in the timing columns and
    /// the refused request size in `peak_bytes`.
    pub fn csv_row(&self) -> String {
        let head = format!("{},{},{},{},{}", self.kind.name(), self.len, self.batch, self.width, self.repeats);
        match self.outcome {
            Outcome::Ok { median_ms, mean_ms, p95_ms, peak_bytes } => {
                format!("{head},{median_ms:.4},{mean_ms:.4},{p95_ms:.4},{peak_bytes},{}", self.flops)
            }
            Outcome::OutOfMemory { bytes } => format!("{head},oom,oom,oom,{bytes},{}", self.flops),
        }
    }
}

pub fn to_csv(records: &[BenchRecord]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Median, mean and nearest-rank 95th percentile.
pub fn summarize(samples_ms: &[f64]) -> (f64, f64, f64) {
    let mut v = samples_ms.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    let mean = v.iter().sum::<f64>() / n as f64;
    let p95 = v[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
    (median, mean, p95)
}

/// Times forward-only inference of one freshly initialized layer.
///
/// `budget` caps fallible allocations; a refused request becomes an
/// out-of-memory record rather than an error.
#[allow(clippy::too_many_arguments)]
pub fn time_layer<T: Float>(
    kind: LayerKind,
    len: usize,
    batch: usize,
    width: usize,
    repeats: usize,
    cfg: &LayerConfig,
    budget: Option<usize>,
    seed: u64,
) -> Result<BenchRecord> {
    if repeats < MIN_REPEATS {
        return Err(Error::Config(format!("repeats must be at least {MIN_REPEATS}, got {repeats}")));
    }
    let mut layout = ParamLayout::new();
    let layer = Layer::register(&mut layout.root(), kind, width, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let store = layout.materialize::<T>(&mut rng);
    let x = Tensor::<T>::randn(&[batch, len, width], 1.0, &mut rng);
    let record =
        |outcome| BenchRecord { kind, len, batch, width, repeats, flops: flops(kind, batch, len, width, cfg), outcome };

    let run = || -> Result<usize> {
        let mut ops = Eager::new(&store);
        let xv = ops.constant(x.clone())?;
        let (y, peak) = measure_peak(|| layer.forward(&mut ops, &xv));
        y?;
        Ok(peak)
    };
    let guarded = || match budget {
        Some(b) => with_budget(b, run),
        None => run(),
    };

    let mut peak = 0;
    for _ in 0..WARMUPS {
        match guarded() {
            Ok(p) => peak = peak.max(p),
            Err(Error::OutOfMemory { bytes }) => return Ok(record(Outcome::OutOfMemory { bytes })),
            Err(e) => return Err(e),
        }
    }
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        peak = peak.max(guarded()?);
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let (median_ms, mean_ms, p95_ms) = summarize(&times);
    Ok(record(Outcome::Ok { median_ms, mean_ms, p95_ms, peak_bytes: peak }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPlan {
    pub kinds: Vec<LayerKind>,
    pub lens: Vec<usize>,
    pub batches: Vec<usize>,
    pub width: usize,
    pub repeats: usize,
    pub precision: Precision,
}

impl SweepPlan {
    pub fn validate(&self) -> Result<()> {
        if self.kinds.is_empty() || self.lens.is_empty() || self.batches.is_empty() {
            return Err(Error::Config("sweep needs at least one kind, length and batch".into()));
        }
        if self.lens.windows(2).any(|w| w[0] >= w[1]) || self.lens[0] == 0 {
            return Err(Error::Config(format!(
                "sweep lengths must be positive and strictly increasing: {:?}",
                self.lens
            )));
        }
        if self.batches.contains(&0) || self.width == 0 {
            return Err(Error::Config("batch sizes and width must be positive".into()));
        }
        if self.repeats < MIN_REPEATS {
            return Err(Error::Config(format!("repeats must be at least {MIN_REPEATS}")));
        }
        Ok(())
    }

    /// Runs every (batch, kind, L) point; `on_record` sees each result as
    /// it completes.
    pub fn run(
        &self,
        cfg: &LayerConfig,
        budget: Option<usize>,
        mut on_record: impl FnMut(&BenchRecord),
    ) -> Result<Vec<BenchRecord>> {
        self.validate()?;
        let mut out = Vec::new();
        for &batch in &self.batches {
            for &kind in &self.kinds {
                for &len in &self.lens {
                    let r = match self.precision {
                        Precision::F32 => {
                            time_layer::<f32>(kind, len, batch, self.width, self.repeats, cfg, budget, 0)?
                        }
                        Precision::F64 => {
                            time_layer::<f64>(kind, len, batch, self.width, self.repeats, cfg, budget, 0)?
                        }
                    };
                    on_record(&r);
                    out.push(r);
                }
            }
        }
        Ok(out)
    }
}

/// Converts image side length to sequence length at patch size 16.
pub fn resolution_to_len(side: usize) -> Result<usize> {
    if side == 0 || !side.is_multiple_of(16) {
        return Err(Error::Config(format!("resolution {side} is not a positive multiple of 16")));
    }
    Ok((side / 16).pow(2))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Exponent {
    pub slope: f64,
    pub stderr: f64,
}

/// Least-squares slope of `ln y` against `ln L`.
pub fn fit_scaling_exponent(points: &[(usize, f64)]) -> Result<Exponent> {
    let (lo, hi) = points.iter().fold((usize::MAX, 0), |(lo, hi), p| (lo.min(p.0), hi.max(p.0)));
    if points.len() < 4 || hi < 8 * lo {
        return Err(Error::invalid(
            "fit_scaling_exponent",
            format!("need >= 4 points spanning >= 8x in L, got {} over [{lo}, {hi}]", points.len()),
        ));
    }
    if points.iter().any(|p| p.0 == 0 || !(p.1 > 0.0)) {
        return Err(Error::invalid("fit_scaling_exponent", "lengths and values must be positive"));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| (p.0 as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let sse: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - my - slope * (x - mx)).powi(2)).sum();
    let stderr = if points.len() > 2 { (sse / (n - 2.0) / sxx).sqrt() } else { 0.0 };
    Ok(Exponent { slope, stderr })
}

/// Points with `L >= L_max / 8`, the large-L regime.
pub fn tail(points: &[(usize, f64)]) -> Vec<(usize, f64)> {
    let max = points.iter().map(|p| p.0).max().unwrap_or(0);
    points.iter().copied().filter(|p| p.0 * 8 >= max).collect()
}

/// Smallest L from which `a` stays strictly below `b` for the rest of the grid.
pub fn find_crossover(a: &[(usize, f64)], b: &[(usize, f64)]) -> Result<Option<usize>> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.0 != y.0) {
        return Err(Error::invalid("find_crossover", "series do not share the same L grid"));
    }
    let mut cross = None;
    for (x, y) in a.iter().zip(b).rev() {
        if x.1 < y.1 {
            cross = Some(x.0);
        } else {
            break;
        }
    }
    Ok(cross)
}

/// `(L, value)` pairs for one kind and batch, skipping out-of-memory points.
pub fn series(
    records: &[BenchRecord],
    kind: LayerKind,
    batch: usize,
    metric: fn(&BenchRecord) -> Option<f64>,
) -> Vec<(usize, f64)> {
    records
        .iter()
        .filter(|r| r.kind == kind && r.batch == batch)
        .filter_map(|r| metric(r).map(|v| (r.len, v)))
        .collect()
}

pub fn time_metric(r: &BenchRecord) -> Option<f64> {
    r.median_ms()
}

pub fn memory_metric(r: &BenchRecord) -> Option<f64> {
    r.peak_bytes().map(|b| b as f64)
}

/// Human-readable exponents (over the large-L tail) and pairwise crossovers.
pub fn summary(records: &[BenchRecord]) -> String {
    let mut kinds: Vec<LayerKind> = Vec::new();
    let mut batches: Vec<usize> = Vec::new();
    for r in records {
        if !kinds.contains(&r.kind) {
            kinds.push(r.kind);
        }
        if !batches.contains(&r.batch) {
            batches.push(r.batch);
        }
    }
    let fmt_fit = |pts: &[(usize, f64)]| match fit_scaling_exponent(&tail(pts)) {
        Ok(e) => format!("{:.3} +- {:.3}", e.slope, e.stderr),
        Err(_) => "n/a".to_string(),
    };
    let mut s = String::new();
    for &batch in &batches {
        let _ = writeln!(s, "batch {batch}");
        for &k in &kinds {
            let t = series(records, k, batch, time_metric);
            let m = series(records, k, batch, memory_metric);
            let oom = records.iter().filter(|r| r.kind == k && r.batch == batch && r.median_ms().is_none()).count();
            let _ = writeln!(
                s,
                "  {:<12} time exponent {}  memory exponent {}  oom points {oom}",
                k.name(),
                fmt_fit(&t),
                fmt_fit(&m)
            );
        }
        for (i, &a) in kinds.iter().enumerate() {
            for &b in &kinds[i + 1..] {
                for (x, y) in [(a, b), (b, a)] {
                    let sx = series(records, x, batch, time_metric);
                    let sy = series(records, y, batch, time_metric);
                    let text = match find_crossover(&sx, &sy) {
                        Ok(Some(l)) => format!("from L = {l}"),
                        Ok(None) => "none".to_string(),
                        Err(_) => "grids differ".to_string(),
                    };
                    let _ = writeln!(s, "  {} faster than {}: {text}", x.name(), y.name());
                }
            }
        }
    }
    s
}
