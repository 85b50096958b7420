use maskmamba_core::backbone::{assemble, Cond, Model, ModelConfig, SchemeKind};
use maskmamba_core::data::Dataset;
use maskmamba_core::mim::{loss_and_grads, sample_mask, MaskSpec, RngState, TrainConfig, Trainer};
use maskmamba_core::ParamLayout;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        hidden: 16,
        scheme: SchemeKind::SerialV2,
        codebook_size: 8,
        n_classes: 4,
        grid_h: 4,
        grid_w: 4,
        ..ModelConfig::default()
    }
}

fn setup(cfg: &ModelConfig) -> (Model, ParamLayout) {
    assemble(cfg).unwrap()
}

fn train_cfg() -> TrainConfig {
    TrainConfig { base_lr: 0.2, batch: 8, steps: Some(200), warmup_epochs: 2, ..TrainConfig::default() }
}

#[test]
fn mean_mask_count_is_three_quarters() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let spec = MaskSpec::default();
    let draws = 100_000;
    let total: usize = (0..draws).map(|_| sample_mask(&mut rng, 256, &spec).iter().filter(|m| **m).count()).sum();
    let mean = total as f64 / draws as f64;
    assert!((mean / 192.0 - 1.0).abs() < 0.01, "mean {mean}");
}

#[test]
fn identical_seeds_give_identical_parameters() {
    let cfg = small();
    let (model, layout) = setup(&cfg);
    let data = Dataset::synthetic(8, 4, 4, 4, 8, 3);
    let mut a = Trainer::<f32>::new(&layout, train_cfg(), 11).unwrap();
    let mut b = Trainer::<f32>::new(&layout, train_cfg(), 11).unwrap();
    for _ in 0..2 {
        a.step_on(&model, &data, None).unwrap();
        b.step_on(&model, &data, None).unwrap();
    }
    assert_eq!(a.params, b.params);
    let mut c = Trainer::<f32>::new(&layout, train_cfg(), 12).unwrap();
    c.step_on(&model, &data, None).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn split_run_matches_uninterrupted_run() {
    let cfg = small();
    let (model, layout) = setup(&cfg);
    let data = Dataset::synthetic(12, 4, 4, 4, 8, 5);
    let mut full = Trainer::<f32>::new(&layout, train_cfg(), 2).unwrap();
    let mut first = full.clone();
    for _ in 0..4 {
        full.step_on(&model, &data, None).unwrap();
    }
    for _ in 0..2 {
        first.step_on(&model, &data, None).unwrap();
    }
    let mut resumed = first.clone();
    resumed.rng = RngState::capture(&first.rng).restore();
    drop(first);
    for _ in 0..2 {
        resumed.step_on(&model, &data, None).unwrap();
    }
    assert_eq!(resumed.params, full.params);
    assert_eq!(resumed.opt, full.opt);
}

#[test]
fn overfit_loss_trends_down() {
    let cfg = small();
    let (model, layout) = setup(&cfg);
    let data = Dataset::synthetic(16, 4, 4, 4, 8, 7);
    let mut t = Trainer::<f32>::new(&layout, train_cfg(), 0).unwrap();
    let losses: Vec<f64> = (0..200).map(|_| t.step_on(&model, &data, None).unwrap().loss).collect();
    let blocks: Vec<f64> = losses.chunks(50).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    assert!(blocks.windows(2).all(|w| w[1] < w[0]), "block means {blocks:?}");
}

#[test]
fn full_condition_dropout_leaves_class_rows_untouched() {
    let cfg = small();
    let (model, layout) = setup(&cfg);
    let store = layout.materialize::<f64>(&mut ChaCha8Rng::seed_from_u64(1));
    let targets: Vec<usize> = (0..32).map(|i| i % 8).collect();
    let mask: Vec<bool> = (0..32).map(|i| i % 3 != 0).collect();
    let cond = Cond::class(vec![1, 2]).with_dropped(vec![true, true]);
    let (_, grads) = loss_and_grads(&model, &store, &targets, &mask, &cond).unwrap();
    let g = grads.get(store.find("class_emb").unwrap()).unwrap();
    let c = cfg.hidden;
    assert!(g[..cfg.n_classes * c].iter().all(|v| *v == 0.0));
    assert!(g[cfg.n_classes * c..].iter().any(|v| *v != 0.0));
}

#[test]
fn masked_targets_do_not_leak_into_the_input() {
    let cfg = small();
    let (model, layout) = setup(&cfg);
    let store = layout.materialize::<f64>(&mut ChaCha8Rng::seed_from_u64(2));
    // id 7 appears only at masked positions
    let mut targets: Vec<usize> = (0..16).map(|i| i % 7).collect();
    let mut mask = vec![false; 16];
    for i in [3, 9, 14] {
        targets[i] = 7;
        mask[i] = true;
    }
    mask[0] = true;
    let (_, grads) = loss_and_grads(&model, &store, &targets, &mask, &Cond::class(vec![0])).unwrap();
    let g = grads.get(store.find("tok_emb").unwrap()).unwrap();
    let c = cfg.hidden;
    assert!(g[7 * c..8 * c].iter().all(|v| *v == 0.0));
    assert!(g[8 * c..9 * c].iter().any(|v| *v != 0.0), "mask row should receive gradient");
}
