//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Exits 0 regardless of outcome unless `MASKMAMBA_ACCEPTANCE_STRICT=1`.
//! `MASKMAMBA_ACCEPTANCE_ONLY=2,5` runs a subset.

use std::error::Error;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use maskmamba_cli::checkpoint::Checkpoint;
use maskmamba_cli::commands::ablate::{run_suite, Suite};
use maskmamba_cli::commands::train::{self, TrainArgs};
use maskmamba_cli::config::RunConfig;
use maskmamba_core::alloc::available_memory;
use maskmamba_core::backbone::{assemble, Cond, Model, ModelConfig, SchemeKind};
use maskmamba_core::bench::{self, BenchRecord, SweepPlan};
use maskmamba_core::data::{histogram, total_variation, Dataset};
use maskmamba_core::decode::{cfg_logits, cosine_keep_fraction, generate, plan_schedule, DecodeConfig};
use maskmamba_core::functional;
use maskmamba_core::gradcheck::{self, ScalarFn};
use maskmamba_core::kernels::ConvMode;
use maskmamba_core::layers::{flops::flops, Layer, LayerConfig, LayerKind};
use maskmamba_core::mim::{eval_loss, MaskSpec, RngState, TrainConfig, Trainer};
use maskmamba_core::ssm::{scan_backward, scan_parallel, scan_sequential, SsmParams};
use maskmamba_core::tokenizer::TokenGrid;
use maskmamba_core::{Eager, Ops, ParamLayout, ParamStore, Precision, Result as CoreResult, Tensor};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<(bool, String), Box<dyn Error>>;
type Probe<'a> = &'a dyn Fn(&Tensor<f64>) -> CoreResult<Tensor<f64>>;

const GRAD_TOL: f64 = 1e-4;
const GRAD_TIME_S: f64 = 120.0;
const SCAN_PAR_TOL: f64 = 1e-10;
const SCAN_BWD_TOL: f64 = 1e-12;
const SCAN_LENS: [usize; 11] = [1, 2, 3, 4, 5, 6, 7, 8, 64, 1000, 4096];
const SCAN_SEEDS_PER_LEN: u64 = 10;
const SCHEDULE_MAX_N: usize = 1024;
const SCHEDULE_MAX_T: usize = 64;
const CFG_EXACT: f64 = 1.1;
const OVERFIT_MAX_STEPS: u64 = 2000;
const OVERFIT_EVAL_EVERY: u64 = 100;
const OVERFIT_CE_FRACTION: f64 = 0.1;
const OVERFIT_TV: f64 = 0.2;
const OVERFIT_SAMPLES: usize = 64;
const SWEEP_WIDTH: usize = 768;
const SWEEP_MAX_L: usize = 16384;
const SWEEP_REPEATS: usize = 5;
const SWEEP_BUDGET_FRACTION: f64 = 0.8;
const EXPONENT_GAP: f64 = 0.5;
const V2_SPEEDUP: f64 = 0.05;

fn main() {
    let strict = std::env::var("MASKMAMBA_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let only: Option<Vec<usize>> = std::env::var("MASKMAMBA_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut sweep: Option<Result<Vec<BenchRecord>, String>> = None;
    let mut failed = 0;
    let mut ran = 0;
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Check| {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            return;
        }
        ran += 1;
        let t0 = Instant::now();
        let (pass, detail) = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(Ok(r)) => r,
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(p) => {
                let msg =
                    p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
                (false, format!("panic: {}", msg.unwrap_or_default()))
            }
        };
        if !pass {
            failed += 1;
        }
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {n} {name}: {detail} ({:.1}s)", t0.elapsed().as_secs_f64());
    };

    report(1, "gradients", &mut gradients);
    report(2, "scan oracle", &mut scan_oracle);
    report(3, "receptive field", &mut receptive_field);
    report(4, "decode schedule", &mut schedule);
    report(5, "guidance", &mut guidance);
    report(6, "overfit", &mut overfit);
    report(7, "scaling", &mut || scaling(sweep_records(&mut sweep)?));
    report(8, "v2 vs v1", &mut || v2_vs_v1(sweep_records(&mut sweep)?));
    report(9, "ablation tables", &mut ablations);
    report(10, "persistence", &mut persistence);

    println!("{} of {ran} criteria passed", ran - failed);
    if strict && failed > 0 {
        std::process::exit(1);
    }
}

fn sweep_records(cache: &mut Option<Result<Vec<BenchRecord>, String>>) -> Result<&[BenchRecord], Box<dyn Error>> {
    let r = cache.get_or_insert_with(|| {
        let lens: Vec<usize> = (0..).map(|i| 64usize << i).take_while(|&l| l <= SWEEP_MAX_L).collect();
        let plan = SweepPlan {
            kinds: vec![LayerKind::Transformer, LayerKind::BiMambaV2, LayerKind::BiMamba],
            lens,
            batches: vec![1],
            width: SWEEP_WIDTH,
            repeats: SWEEP_REPEATS,
            precision: Precision::F32,
        };
        let budget = available_memory().map(|b| (b as f64 * SWEEP_BUDGET_FRACTION) as usize);
        plan.run(&LayerConfig::default(), budget, |r| eprintln!("  {}", r.csv_row())).map_err(|e| e.to_string())
    });
    match r {
        Ok(v) => Ok(v),
        Err(e) => Err(e.clone().into()),
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn build_layer(kind: LayerKind, width: usize, seed: u64) -> CoreResult<(Layer, ParamStore<f64>)> {
    let mut layout = ParamLayout::new();
    let layer = Layer::register(&mut layout.root(), kind, width, &LayerConfig::default())?;
    Ok((layer, layout.materialize(&mut ChaCha8Rng::seed_from_u64(seed))))
}

fn run_layer(layer: &Layer, store: &ParamStore<f64>, x: &Tensor<f64>) -> CoreResult<Tensor<f64>> {
    let mut ops = Eager::new(store);
    let x = ops.constant(x.clone())?;
    Ok(layer.forward(&mut ops, &x)?.into_tensor())
}

struct LayerLoss<'a>(&'a Layer);

impl ScalarFn for LayerLoss<'_> {
    fn eval<O: Ops<f64>>(&self, ops: &mut O, inputs: &[O::V]) -> CoreResult<O::V> {
        let y = self.0.forward(ops, &inputs[0])?;
        gradcheck::project(ops, &y, 5)
    }
}

struct ModelLoss<'a> {
    model: &'a Model,
    tokens: Vec<usize>,
    cond: Cond<f64>,
}

impl ScalarFn for ModelLoss<'_> {
    fn eval<O: Ops<f64>>(&self, ops: &mut O, _inputs: &[O::V]) -> CoreResult<O::V> {
        let y = self.model.logits(ops, &self.tokens, &self.cond)?;
        gradcheck::project(ops, &y, 11)
    }
}

fn gradients() -> Check {
    let t0 = Instant::now();
    let mut worst = (0.0f64, String::new());
    let mut note = |what: String, r: gradcheck::GradReport| {
        if r.max_rel_err >= worst.0 {
            worst = (r.max_rel_err, format!("{what} {}", r.worst));
        }
    };
    for kind in LayerKind::ALL {
        let (layer, store) = build_layer(kind, 8, 1)?;
        let r = gradcheck::check(&LayerLoss(&layer), &store, &[randn(&[1, 5, 8], 2)], 12)?;
        note(kind.to_string(), r);
    }
    for scheme in SchemeKind::ALL {
        let cfg = ModelConfig {
            n_layers: 2,
            hidden: 8,
            scheme,
            codebook_size: 5,
            n_classes: 3,
            grid_h: 2,
            grid_w: 2,
            ..ModelConfig::default()
        };
        let (model, layout) = assemble(&cfg)?;
        let store = layout.materialize(&mut ChaCha8Rng::seed_from_u64(7));
        let loss = ModelLoss { model: &model, tokens: vec![0, 5, 2, 5, 4, 1, 5, 3], cond: Cond::class(vec![2, 0]) };
        note(scheme.to_string(), gradcheck::check(&loss, &store, &[], 6)?);
    }
    let secs = t0.elapsed().as_secs_f64();
    Ok((
        worst.0 < GRAD_TOL && secs < GRAD_TIME_S,
        format!(
            "6 layers + 6 schemes, max rel err {:.2e} at {} (tol {GRAD_TOL:.0e}), {secs:.1}s of {GRAD_TIME_S}s",
            worst.0, worst.1
        ),
    ))
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Independent right-to-left evaluation of the selective scan on `[B, L, D]`.
fn reverse_oracle(u: &Tensor<f64>, p: &SsmParams<f64>) -> Vec<f64> {
    let (bsz, len, d) = (u.shape()[0], u.shape()[1], u.shape()[2]);
    let wx = p.store.get(p.ids.w_x);
    let wdt = p.store.get(p.ids.w_dt);
    let (r, n) = (p.ids.dt_rank, p.ids.d_state);
    let cols = r + 2 * n;
    let (a, dskip, bias) = (p.a(), p.d_skip().data().to_vec(), p.dt_bias().data().to_vec());
    let mut y = vec![0.0; bsz * len * d];
    for b in 0..bsz {
        let mut h = vec![0.0; d * n];
        for t in (0..len).rev() {
            let row = &u.data()[(b * len + t) * d..(b * len + t + 1) * d];
            let proj: Vec<f64> = (0..cols).map(|j| (0..d).map(|i| row[i] * wx.data()[i * cols + j]).sum()).collect();
            let (low, rest) = proj.split_at(r);
            let (bt, ct) = rest.split_at(n);
            for di in 0..d {
                let dt = softplus(bias[di] + (0..r).map(|k| low[k] * wdt.data()[k * d + di]).sum::<f64>());
                let mut acc = 0.0;
                for ni in 0..n {
                    let hi = &mut h[di * n + ni];
                    *hi = (dt * a.data()[di * n + ni]).exp() * *hi + dt * bt[ni] * row[di];
                    acc += ct[ni] * *hi;
                }
                y[(b * len + t) * d + di] = acc + dskip[di] * row[di];
            }
        }
    }
    y
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / y.abs().max(1.0)).fold(0.0, f64::max)
}

fn scan_oracle() -> Check {
    let (mut worst_par, mut worst_bwd, mut count) = (0.0f64, 0.0f64, 0);
    for &len in &SCAN_LENS {
        for s in 0..SCAN_SEEDS_PER_LEN {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 * len as u64 + s);
            let (d, n, bsz) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=2));
            let p = SsmParams::<f64>::new(d, n, &mut rng);
            let u = Tensor::randn(&[bsz, len, d], 1.0, &mut rng);
            let seq = scan_sequential(&u, &p)?;
            let par = scan_parallel(&u, &p)?;
            worst_par = worst_par.max(max_rel(par.data(), seq.data()));
            let bwd = scan_backward(&u, &p)?;
            worst_bwd = worst_bwd.max(max_rel(bwd.data(), &reverse_oracle(&u, &p)));
            count += 1;
        }
    }
    Ok((
        count >= 100 && worst_par <= SCAN_PAR_TOL && worst_bwd <= SCAN_BWD_TOL,
        format!("{count} instances, parallel vs sequential {worst_par:.1e} (tol {SCAN_PAR_TOL:.0e}), backward vs oracle {worst_bwd:.1e} (tol {SCAN_BWD_TOL:.0e})"),
    ))
}

/// Per-position L1 change of `f` when row `probe` of the input moves.
fn position_deltas(len: usize, ch: usize, probe: usize, f: Probe) -> CoreResult<Vec<f64>> {
    let x = randn(&[1, len, ch], 31);
    let base = f(&x)?;
    let mut xp = x.clone();
    for c in 0..ch {
        xp.data_mut()[probe * ch + c] += 0.1 * (c as f64 + 1.0) * if c % 2 == 0 { 1.0 } else { -1.0 };
    }
    let moved = f(&xp)?;
    let out_ch = base.shape()[2];
    Ok((0..len)
        .map(|t| (0..out_ch).map(|c| (moved.data()[t * out_ch + c] - base.data()[t * out_ch + c]).abs()).sum())
        .collect())
}

fn receptive_field() -> Check {
    let (len, ch, probe) = (12, 8, 7);
    let mut lines = Vec::new();
    let mut ok = true;

    let kernel = randn(&[4, ch], 40);
    let conv = |x: &Tensor<f64>| functional::conv1d(x, &kernel, None, ConvMode::Causal);
    let ssm = SsmParams::<f64>::new(ch, 4, &mut ChaCha8Rng::seed_from_u64(41));
    let scan = |x: &Tensor<f64>| scan_sequential(x, &ssm);
    let (mamba, mstore) = build_layer(LayerKind::Mamba, ch, 42)?;
    let mamba_fwd = |x: &Tensor<f64>| run_layer(&mamba, &mstore, x);
    let causal: [(&str, Probe); 3] = [("causal conv", &conv), ("forward scan", &scan), ("mamba", &mamba_fwd)];
    for (name, f) in causal {
        let d = position_deltas(len, ch, probe, f)?;
        let leak = d[..probe].iter().any(|&v| v != 0.0);
        let reach = d[probe] > 0.0;
        ok &= !leak && reach;
        lines.push(format!("{name} past {}", if leak { "leaks" } else { "exact zero" }));
    }

    for kind in [LayerKind::BiMambaV2, LayerKind::Transformer] {
        let (layer, store) = build_layer(kind, ch, 43)?;
        let f = |x: &Tensor<f64>| run_layer(&layer, &store, x);
        let future = position_deltas(len, ch, 8, &f)?[4];
        let past = position_deltas(len, ch, 1, &f)?[4];
        ok &= future > 0.0 && past > 0.0;
        lines.push(format!("{kind} future {future:.1e} past {past:.1e}"));
    }
    Ok((ok, lines.join(", ")))
}

fn schedule() -> Check {
    let mut cases = 0usize;
    for n in 1..=SCHEDULE_MAX_N {
        for t in 1..=SCHEDULE_MAX_T.min(n) {
            let c = plan_schedule(n, t)?;
            if c.len() != t || c.iter().sum::<usize>() != n || c.contains(&0) {
                return Ok((false, format!("N={n} T={t} gives {c:?}")));
            }
            cases += 1;
        }
    }
    for t in 1..=SCHEDULE_MAX_T {
        if cosine_keep_fraction(0, t)? != 1.0 || cosine_keep_fraction(t, t)? != 0.0 {
            return Ok((false, format!("cosine endpoints inexact at T={t}")));
        }
    }
    Ok((true, format!("{cases} (N, T) pairs conserve N with every step >= 1; cosine endpoints exact")))
}

/// Decoder written against raw logits: temperature softmax over the codebook
/// entries, one uniform draw per masked position in order, commit the most
/// confident candidates with ties to the lower position.
fn oracle_decode(
    model: &Model,
    params: &ParamStore<f64>,
    cond: &Cond<f64>,
    cfg: &DecodeConfig,
) -> CoreResult<Vec<Vec<usize>>> {
    let mc = &model.config;
    let (n, k, v, mask) = (mc.n_image(), mc.codebook_size, mc.vocab_size(), mc.mask_token_id());
    let batch = cond.batch();
    let counts = plan_schedule(n, cfg.steps)?;
    let mut ids = vec![vec![None::<usize>; n]; batch];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for quota in counts {
        let tokens: Vec<usize> = ids.iter().flatten().map(|x| x.unwrap_or(mask)).collect();
        let mut ops = Eager::new(params);
        let logits = model.logits(&mut ops, &tokens, cond)?.into_tensor();
        for (b, sample) in ids.iter_mut().enumerate() {
            let mut cands = Vec::new();
            for pos in (0..n).filter(|&p| sample[p].is_none()) {
                let row = &logits.data()[(b * n + pos) * v..][..k];
                let top = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = row.iter().map(|x| ((x - top) / cfg.temperature).exp()).collect();
                let z: f64 = w.iter().sum();
                let target = rng.random::<f64>() * z;
                let mut cum = 0.0;
                let pick = w
                    .iter()
                    .position(|p| {
                        cum += p;
                        target < cum
                    })
                    .unwrap_or(k - 1);
                cands.push((pos, pick, w[pick] / z));
            }
            cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
            for &(pos, id, _) in &cands[..quota] {
                sample[pos] = Some(id);
            }
        }
    }
    Ok(ids.into_iter().map(|s| s.into_iter().map(|x| x.expect("fully decoded")).collect()).collect())
}

fn guidance() -> Check {
    let cfg = ModelConfig {
        n_layers: 2,
        hidden: 16,
        codebook_size: 8,
        n_classes: 4,
        grid_h: 4,
        grid_w: 4,
        ..ModelConfig::default()
    };
    let (model, layout) = assemble(&cfg)?;
    let params = layout.materialize::<f64>(&mut ChaCha8Rng::seed_from_u64(9));
    let cond = Cond::class(vec![0, 3, 1]);
    let ids = |g: Vec<TokenGrid>| g.into_iter().map(|g| g.ids).collect::<Vec<_>>();
    let dc = DecodeConfig { steps: 6, temperature: 1.3, seed: 17, cfg_scale: 1.0 };

    model.reset_forward_count();
    let (g1, _) = generate(&model, &params, &cond, &dc)?;
    let passes = model.forward_count();
    let s1 = ids(g1) == oracle_decode(&model, &params, &cond, &dc)?;
    let (g0, _) = generate(&model, &params, &cond, &DecodeConfig { cfg_scale: 0.0, ..dc })?;
    let s0 = ids(g0) == oracle_decode(&model, &params, &cond.to_null(), &dc)?;

    let lu = Tensor::from_vec(&[1], vec![0.2f64])?;
    let lc = Tensor::from_vec(&[1], vec![0.5f64])?;
    let mixed = cfg_logits(&lu, &lc, 3.0)?.data()[0];
    Ok((
        s1 && s0 && passes == dc.steps && mixed == CFG_EXACT,
        format!(
            "s=1 matches conditional oracle: {s1} ({passes} forwards for {} steps), s=0 matches null oracle: {s0}, mix(0.2, 0.5, 3) = {mixed}",
            dc.steps
        ),
    ))
}

fn overfit() -> Check {
    let (k, classes, images) = (16, 8, 8);
    let cfg = ModelConfig {
        n_layers: 4,
        hidden: 64,
        scheme: SchemeKind::SerialV2,
        codebook_size: k,
        n_classes: classes,
        grid_h: 8,
        grid_w: 8,
        ..ModelConfig::default()
    };
    let (model, layout) = assemble(&cfg)?;
    let data = Dataset::synthetic(images, classes, 8, 8, k, 1);
    let tc = TrainConfig {
        base_lr: 2e-3 * 256.0 / 8.0,
        batch: 8,
        steps: Some(OVERFIT_MAX_STEPS),
        warmup_epochs: 100,
        ..TrainConfig::default()
    };
    let mut tr = Trainer::<f32>::new(&layout, tc, 0)?;
    let target = OVERFIT_CE_FRACTION * (k as f64).ln();
    let mut reached = None;
    let mut last = f64::NAN;
    while tr.step < OVERFIT_MAX_STEPS {
        tr.step_on(&model, &data, None)?;
        if tr.step % OVERFIT_EVAL_EVERY == 0 {
            last = eval_loss(&model, &tr.params, &data, None, &MaskSpec::default(), 7)?;
            if last < target {
                reached = Some(tr.step);
                break;
            }
        }
    }
    let Some(step) = reached else {
        return Ok((false, format!("masked CE {last:.4} still above {target:.4} after {OVERFIT_MAX_STEPS} steps")));
    };
    let cond: Cond<f32> = Cond::class((0..OVERFIT_SAMPLES).map(|i| i % classes).collect());
    let (grids, _) = generate(&model, &tr.params, &cond, &DecodeConfig::default())?;
    let tv = total_variation(&histogram(grids.iter(), k), &data.histogram(k));
    Ok((
        tv < OVERFIT_TV,
        format!("masked CE {last:.4} < {target:.4} at step {step}; token TV over {OVERFIT_SAMPLES} samples {tv:.4} (tol {OVERFIT_TV})"),
    ))
}

fn exponent(
    records: &[BenchRecord],
    kind: LayerKind,
    metric: fn(&BenchRecord) -> Option<f64>,
) -> Result<f64, Box<dyn Error>> {
    Ok(bench::fit_scaling_exponent(&bench::tail(&bench::series(records, kind, 1, metric)))?.slope)
}

fn scaling(records: &[BenchRecord]) -> Check {
    let (st, sv) = (
        exponent(records, LayerKind::Transformer, bench::time_metric)?,
        exponent(records, LayerKind::BiMambaV2, bench::time_metric)?,
    );
    let (mt, mv) = (
        exponent(records, LayerKind::Transformer, bench::memory_metric)?,
        exponent(records, LayerKind::BiMambaV2, bench::memory_metric)?,
    );
    let cross = bench::find_crossover(
        &bench::series(records, LayerKind::BiMambaV2, 1, bench::time_metric),
        &bench::series(records, LayerKind::Transformer, 1, bench::time_metric),
    )?;
    let ooms = records.iter().filter(|r| r.median_ms().is_none()).count();
    let (tg, mg) = (st - sv, mt - mv);
    Ok((
        tg >= EXPONENT_GAP && mg >= EXPONENT_GAP && cross.is_some(),
        format!(
            "time exponent transformer {st:.2} vs bimamba_v2 {sv:.2} (gap {tg:.2}), memory exponent {mt:.2} vs {mv:.2} (gap {mg:.2}), need gaps >= {EXPONENT_GAP}; crossover L* = {}; {ooms} oom rows",
            cross.map_or("none".into(), |l| l.to_string())
        ),
    ))
}

fn v2_vs_v1(records: &[BenchRecord]) -> Check {
    let cfg = LayerConfig::default();
    let lens: Vec<usize> = records.iter().filter(|r| r.kind == LayerKind::BiMambaV2).map(|r| r.len).collect();
    let flops_ok = lens.iter().all(|&l| {
        flops(LayerKind::BiMambaV2, 1, l, SWEEP_WIDTH, &cfg) < flops(LayerKind::BiMamba, 1, l, SWEEP_WIDTH, &cfg)
    });
    let at = |kind| {
        records
            .iter()
            .filter(|r| r.kind == kind && r.median_ms().is_some())
            .max_by_key(|r| r.len)
            .map(|r| (r.len, r.median_ms().unwrap_or(f64::NAN)))
    };
    let (Some((l2, t2)), Some((l1, t1))) = (at(LayerKind::BiMambaV2), at(LayerKind::BiMamba)) else {
        return Ok((false, "missing timings".into()));
    };
    let gain = 1.0 - t2 / t1;
    Ok((
        flops_ok && l1 == l2 && gain >= V2_SPEEDUP,
        format!("FLOPs lower at all {} lengths: {flops_ok}; at L={l2} median {t2:.1} ms vs {t1:.1} ms ({:.0}% faster, need {:.0}%)", lens.len(), gain * 100.0, V2_SPEEDUP * 100.0),
    ))
}

const ABLATION_CONFIG: &str = r#"
seed = 5
precision = "f32"

[model]
n_layers = 2
hidden = 16
codebook_size = 8
n_classes = 4
grid_h = 8
grid_w = 8

[train]
base_lr = 0.1
batch = 4
steps = 4
warmup_epochs = 1

[data.synthetic]
images = 4
seed = 2
patch = 2
channels = 3
"#;

fn ablations() -> Check {
    let cfg = RunConfig::parse(ABLATION_CONFIG)?;
    let expect: [(Suite, Vec<String>); 5] = [
        (Suite::Schemes, ["group_v1", "group_v2", "serial_v1", "serial_v2"].map(String::from).to_vec()),
        (
            Suite::Backbones,
            ["bimamba", "bimamba_v2", "transformer", "bimamba+transformer", "bimamba_v2+transformer"]
                .map(String::from)
                .to_vec(),
        ),
        (Suite::CondPos, ["head", "middle", "tail"].map(String::from).to_vec()),
        (Suite::CfgSweep, ["0", "1", "2", "3", "4"].map(|s| format!("cfg={s}")).to_vec()),
        (Suite::IterSweep, ["5", "10", "15", "20", "25"].map(|s| format!("steps={s}")).to_vec()),
    ];
    let mut sizes = Vec::new();
    let mut ok = true;
    for (suite, names) in expect {
        let rows = run_suite(suite, &cfg, &mut std::io::sink())?;
        let got: Vec<String> = rows.iter().map(|r| r.variant.clone()).collect();
        let finite = rows.iter().all(|r| r.val_loss.is_finite() && r.gen_tv.is_finite());
        if got != names || !finite {
            ok = false;
            sizes.push(format!("{suite} rows {got:?}"));
        } else {
            sizes.push(format!("{suite} {}", rows.len()));
        }
    }
    Ok((ok, sizes.join(", ")))
}

const PERSIST_CONFIG: &str = r#"
seed = 11
precision = "f32"

[model]
n_layers = 2
hidden = 16
codebook_size = 8
n_classes = 4
grid_h = 4
grid_w = 4

[train]
base_lr = 0.2
batch = 4
steps = 30
warmup_epochs = 1
cond_dropout = 0.3

[data.synthetic]
images = 8
seed = 1
patch = 2
channels = 3

[output]
checkpoint_every = 10
log_every = 0
"#;

fn persistence() -> Check {
    let cfg = RunConfig::parse(PERSIST_CONFIG)?;
    let (model, layout) = assemble(&cfg.model)?;
    let data = Dataset::synthetic(8, 4, 4, 4, 8, 1);
    let mut tr = Trainer::<f32>::new(&layout, cfg.train.clone(), cfg.seed)?;
    for _ in 0..7 {
        tr.step_on(&model, &data, None)?;
    }
    let ck = Checkpoint::from_trainer(&cfg, &tr);
    let mut bytes = Vec::new();
    ck.write_to(&mut bytes)?;
    let back = Checkpoint::<f32>::read_from(bytes.as_slice())?;
    let mut again = Vec::new();
    back.write_to(&mut again)?;
    let (_, mut restored) = back.trainer()?;
    let same_rng =
        restored.rng.next_u64() == tr.rng.next_u64() && RngState::capture(&restored.rng) == RngState::capture(&tr.rng);
    let bit_exact = back == ck && again == bytes;

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("run.toml");
    std::fs::write(&path, PERSIST_CONFIG)?;
    let (full, split) = (dir.path().join("full"), dir.path().join("split"));
    let sink = &mut std::io::sink();
    train::run(&TrainArgs { config: Some(path.clone()), out: full.clone(), ..TrainArgs::default() }, sink)?;
    train::run(
        &TrainArgs { config: Some(path), out: split.clone(), stop_after: Some(13), ..TrainArgs::default() },
        sink,
    )?;
    let ck_path = split.join(train::CHECKPOINT_NAME);
    train::run(&TrainArgs { resume: Some(ck_path.clone()), out: split, ..TrainArgs::default() }, sink)?;
    let a = Checkpoint::<f32>::load(&full.join(train::CHECKPOINT_NAME))?;
    let b = Checkpoint::<f32>::load(&ck_path)?;
    let resumed = a == b && a.step == 30;
    Ok((
        bit_exact && same_rng && resumed,
        format!(
            "{} byte checkpoint round trip exact: {bit_exact}, rng stream continues: {same_rng}, 13 + 17 steps equal 30 uninterrupted: {resumed}",
            bytes.len()
        ),
    ))
}
