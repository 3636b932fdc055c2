mod common;

use common::{numeric_grad, rel_err};
use msdeform::attention::{compute_sampling_locations, DeformAttnConfig};
use msdeform::decoder::toy::{toy_task_generate, ToyInstance, ToyTaskSpec, RAW_CHANNELS};
use msdeform::decoder::train::{loss_and_grads, run_two_phase_training, train_step, Phase};
use msdeform::decoder::MiniDecoder;
use msdeform::optim::{AdamWConfig, AdamWState};
use msdeform::pyramid::SpatialShape;
use msdeform::sampling::boundary_distance;
use msdeform::schedule::{LrGroupTable, TrainPolicy};
use msdeform::{Error, SamplingMode};

fn small_cfg(mode: SamplingMode, layers: usize) -> DeformAttnConfig {
    DeformAttnConfig {
        heads: 2,
        points_per_level: vec![2, 1],
        num_query: 2,
        num_decoder: layers,
        embed_dim: 8,
        sampling_mode: mode,
    }
}

fn small_task() -> ToyTaskSpec {
    ToyTaskSpec::new(
        vec![SpatialShape::new(6, 6), SpatialShape::new(3, 3)],
        2,
        1,
        8,
    )
}

fn first_layer_clear(model: &MiniDecoder, inst: &ToyInstance, margin: f64) -> bool {
    let shapes = inst.pyramid.spatial_shapes();
    let layer = &model.layers[0];
    let locs =
        compute_sampling_locations(&inst.queries, &layer.attn, &layer.attn_cfg, &shapes).unwrap();
    locs.iter().zip(&shapes).all(|(l, s)| {
        l.data().chunks_exact(2).all(|p| {
            boundary_distance(p[0] * s.width as f64) >= margin
                && boundary_distance(p[1] * s.height as f64) >= margin
        })
    })
}

fn check_decoder_gradients(mode: SamplingMode) {
    let mut checked = 0;
    for seed in 0..20u64 {
        let mut model = MiniDecoder::new(&small_cfg(mode, 1), RAW_CHANNELS, seed).unwrap();
        // Move off the symmetric initialization so every tensor matters.
        let mut r = common::rng(seed);
        for t in model.tensors_mut() {
            let j = common::random(&mut r, t.shape(), -0.2, 0.2);
            *t = t.axpy(1.0, &j).unwrap();
        }
        let inst = toy_task_generate(seed, &small_task()).unwrap();
        if !first_layer_clear(&model, &inst, 1e-3) {
            continue;
        }
        let (_, grads) = loss_and_grads(&model, &inst).unwrap();
        let infos = model.param_info();
        for (i, analytic) in grads.iter().enumerate() {
            let base = model.tensors()[i].clone();
            let numeric = numeric_grad(&base, 1e-6, |t| {
                let mut m = model.clone();
                *m.tensors_mut()[i] = t.clone();
                loss_and_grads(&m, &inst).unwrap().0
            });
            if mode == SamplingMode::Discrete && infos[i].is_offset {
                assert_eq!(analytic.max_abs(), 0.0, "{}", infos[i].name);
            }
            let err = rel_err(analytic.data(), numeric.data());
            assert!(err < 1e-6, "seed {seed} {}: {err:e}", infos[i].name);
        }
        checked += 1;
        if checked == 4 {
            return;
        }
    }
    panic!("only {checked} kink-free decoders");
}

#[test]
fn decoder_gradients_bilinear() {
    check_decoder_gradients(SamplingMode::Bilinear);
}

#[test]
fn decoder_gradients_discrete() {
    check_decoder_gradients(SamplingMode::Discrete);
}

#[test]
fn blob_peaks_sit_at_targets() {
    let spec = ToyTaskSpec::new(ToyTaskSpec::pyramid_shapes(16, 3), 4, 2, 8);
    let inst = toy_task_generate(3, &spec).unwrap();
    let finest = inst.pyramid.levels()[0].values();
    let (h, w) = (16, 16);
    for b in 0..2 {
        for q in 0..4 {
            let (tx, ty) = (inst.targets.at(&[b, q, 0]), inst.targets.at(&[b, q, 1]));
            let (rx, ry) = spec.reference_point(q);
            // Argmax of the intensity channel within the query's quadrant.
            let mut best = (f64::NEG_INFINITY, 0, 0);
            for y in 0..h {
                for x in 0..w {
                    let (xn, yn) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
                    if (xn - rx).abs() < 0.25 && (yn - ry).abs() < 0.25 {
                        let v = finest.at(&[b, 0, y, x]);
                        if v > best.0 {
                            best = (v, x, y);
                        }
                    }
                }
            }
            let (px, py) = (
                (best.1 as f64 + 0.5) / w as f64,
                (best.2 as f64 + 0.5) / h as f64,
            );
            assert!(
                (px - tx).abs() <= 1.0 / w as f64 && (py - ty).abs() <= 1.0 / h as f64,
                "b {b} q {q}"
            );
        }
    }
}

#[test]
fn discrete_steps_leave_offsets_bitwise_unchanged() {
    let mut model =
        MiniDecoder::new(&small_cfg(SamplingMode::Bilinear, 2), RAW_CHANNELS, 1).unwrap();
    model.set_sampling_mode(SamplingMode::Discrete);
    let before = model.clone();
    let before_checksum = model.offset_checksum();
    let mut opt = AdamWState::new(AdamWConfig::default(), model.tensors());
    let lrs = LrGroupTable::new(1e-3, 5e-3).unwrap();
    for seed in 0..10 {
        let inst = toy_task_generate(seed, &small_task()).unwrap();
        train_step(&mut model, &inst, &mut opt, &lrs).unwrap();
    }
    assert_eq!(model.offset_checksum(), before_checksum);
    for ((info, a), b) in model
        .param_info()
        .iter()
        .zip(model.tensors())
        .zip(before.tensors())
    {
        if info.is_offset {
            assert!(a.bitwise_eq(b), "{} moved", info.name);
            assert!(info.frozen);
        } else if !info.name.contains("norm") || info.name.ends_with("gamma") {
            assert!(!a.bitwise_eq(b), "{} did not move", info.name);
        }
    }
}

#[test]
fn non_finite_loss_is_reported() {
    let mut model =
        MiniDecoder::new(&small_cfg(SamplingMode::Bilinear, 1), RAW_CHANNELS, 1).unwrap();
    let mut inst = toy_task_generate(0, &small_task()).unwrap();
    inst.targets.data_mut()[0] = f64::NAN;
    let mut opt = AdamWState::new(AdamWConfig::default(), model.tensors());
    let before = model.clone();
    let err = train_step(
        &mut model,
        &inst,
        &mut opt,
        &LrGroupTable::new(1e-3, 1e-3).unwrap(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Divergence { .. }));
    assert_eq!(model, before);
}

#[test]
fn two_phase_run_is_deterministic_and_learns() {
    let policy = TrainPolicy {
        epochs_pretrain: 6,
        epochs_finetune: 1,
        cutoff: 1,
        steps_per_epoch: 6,
        ..Default::default()
    };
    let (a, model_a) = run_two_phase_training(17, &policy).unwrap();
    let (b, model_b) = run_two_phase_training(17, &policy).unwrap();
    assert_eq!(a.to_jsonl(), b.to_jsonl());
    assert_eq!(model_a, model_b);
    let (c, _) = run_two_phase_training(18, &policy).unwrap();
    assert_ne!(a.to_jsonl(), c.to_jsonl());

    assert!(a.aborted.is_none());
    assert!(a.swap_preserved_weights());
    assert!(
        a.final_loss <= 0.5 * a.initial_loss,
        "{} vs {}",
        a.final_loss,
        a.initial_loss
    );
    assert_eq!(a.epochs[6].phase, Phase::Finetune);
    assert_eq!(a.epochs[6].mode, SamplingMode::Discrete);
    assert_eq!(a.epochs[6].offset_checksum, a.epochs[5].offset_checksum);
    assert_eq!(a.ema_updates, 7 * 6);
}
