use maskmamba_core::backbone::{assemble, Cond, Model, ModelConfig, SchemeKind};
use maskmamba_core::decode::{decode_step, generate, plan_schedule, DecodeConfig, MaskState};
use maskmamba_core::ParamStore;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model(seed: u64) -> (Model, ParamStore<f32>) {
    let cfg = ModelConfig {
        n_layers: 2,
        hidden: 16,
        scheme: SchemeKind::SerialV2,
        codebook_size: 8,
        n_classes: 4,
        grid_h: 4,
        grid_w: 4,
        ..ModelConfig::default()
    };
    let (m, layout) = assemble(&cfg).unwrap();
    let store = layout.materialize(&mut ChaCha8Rng::seed_from_u64(seed));
    (m, store)
}

#[test]
fn generation_is_complete_and_seeded() {
    let (m, p) = model(0);
    let cond = Cond::class(vec![0, 3]);
    let dc = DecodeConfig { steps: 6, ..DecodeConfig::default() };
    let (a, _) = generate(&m, &p, &cond, &dc).unwrap();
    let (b, _) = generate(&m, &p, &cond, &dc).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|g| g.ids.len() == 16 && g.ids.iter().all(|&i| i < 8)));
    let (c, _) = generate(&m, &p, &cond, &DecodeConfig { seed: 1, ..dc }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn committed_tokens_never_change() {
    let (m, p) = model(1);
    let cond = Cond::class(vec![2]);
    let dc = DecodeConfig { steps: 5, ..DecodeConfig::default() };
    let mut state = MaskState::new(1, 16, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut prev_committed = 0;
    for t in 0..5 {
        let before = state.ids.clone();
        decode_step(&m, &p, &mut state, &cond, t, &dc, &mut rng).unwrap();
        for (b, a) in before.iter().zip(&state.ids) {
            if b.is_some() {
                assert_eq!(b, a);
            }
        }
        assert!(state.committed() > prev_committed);
        prev_committed = state.committed();
    }
    assert_eq!(state.committed(), 16);
    assert!(decode_step(&m, &p, &mut state, &cond, 4, &dc, &mut rng).is_err());
}

#[test]
fn guidance_scale_one_needs_a_single_forward() {
    let (m, p) = model(2);
    let cond = Cond::class(vec![1]);
    for (s, per_step) in [(1.0, 1), (3.0, 2), (0.0, 2)] {
        m.reset_forward_count();
        generate(&m, &p, &cond, &DecodeConfig { steps: 4, cfg_scale: s, ..DecodeConfig::default() }).unwrap();
        assert_eq!(m.forward_count(), 4 * per_step, "s = {s}");
    }
}

#[test]
fn trace_shows_top_confidence_commits() {
    let (m, p) = model(3);
    let (_, trace) =
        generate(&m, &p, &Cond::class(vec![0, 1, 2]), &DecodeConfig { steps: 7, ..DecodeConfig::default() }).unwrap();
    assert_eq!(trace.len(), 21);
    for r in &trace {
        assert!(r.min_confidence >= r.max_rejected, "{r:?}");
    }
    assert!(trace.iter().filter(|r| r.step == 6).all(|r| r.committed == 16));
}

#[test]
fn too_many_steps_is_an_error() {
    let (m, p) = model(4);
    assert!(generate(&m, &p, &Cond::class(vec![0]), &DecodeConfig { steps: 17, ..DecodeConfig::default() }).is_err());
}

proptest! {
    #[test]
    fn schedule_conserves_tokens(n in 1usize..=1024, t_raw in 1usize..=64) {
        let t = t_raw.min(n);
        let c = plan_schedule(n, t).unwrap();
        prop_assert_eq!(c.len(), t);
        prop_assert_eq!(c.iter().sum::<usize>(), n);
        prop_assert!(c.iter().all(|&x| x >= 1));
    }
}
