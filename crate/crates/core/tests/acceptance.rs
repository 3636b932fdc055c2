//! Acceptance checks, one line per criterion. Runs without the libtest
//! harness so the lines print in order; exits nonzero if any check fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{naive_msda, rel_err, Instance};
use msdeform::attention::{count_sampling_points, points_preset, DeformAttnConfig};
use msdeform::decoder::toy::{toy_task_generate, ToyTaskSpec, RAW_CHANNELS};
use msdeform::decoder::train::{run_two_phase_training, train_step, Phase};
use msdeform::decoder::MiniDecoder;
use msdeform::optim::{AdamWConfig, AdamWState};
use msdeform::pyramid::SpatialShape;
use msdeform::schedule::{
    build_param_groups, ema_update, AugmentOp, AugmentationPolicy, EmaState, LrGroupTable,
    ModelSize, ParamGroup, TrainPolicy,
};
use msdeform::verify::{run_bench, run_equivalence, run_gradcheck, BenchConfig, GradcheckConfig};
use msdeform::{DenseArray, SamplingMode};

const GRAD_TOL: f64 = 1e-4;
const NAIVE_TOL: f64 = 1e-10;
const EMA_TOL: f64 = 1e-12;
const LOSS_RATIO: f64 = 0.5;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn point_totals() -> Outcome {
    let rows = [(12usize, 86_400u64), (9, 64_800), (6, 43_200), (3, 21_600)];
    let mut got = Vec::new();
    let mut pass = true;
    for (sum, total) in rows {
        let cfg = DeformAttnConfig {
            points_per_level: points_preset(sum).unwrap(),
            ..Default::default()
        };
        let n = count_sampling_points(&cfg);
        pass &= n == total && cfg.heads == 8 && cfg.num_query == 300 && cfg.num_decoder == 3;
        got.push(n);
    }
    outcome(pass, format!("totals {got:?}, exact"))
}

fn lr_groups() -> Outcome {
    let rows = [
        (ModelSize::S, 1e-4),
        (ModelSize::M, 5e-5),
        (ModelSize::L, 1e-5),
        (ModelSize::X, 1e-6),
    ];
    let mut pass = true;
    for (size, backbone) in rows {
        let t = build_param_groups(size);
        pass &= t.rate(ParamGroup::Backbone) == backbone && t.rate(ParamGroup::Detector) == 1e-4;
    }
    outcome(pass, "backbone 1e-4/5e-5/1e-5/1e-6, detector 1e-4, exact")
}

fn gradient_suite() -> Outcome {
    let cfg = GradcheckConfig::default();
    let shape_ok = cfg.shapes
        == [
            SpatialShape::new(8, 8),
            SpatialShape::new(4, 4),
            SpatialShape::new(2, 2),
        ]
        && cfg.channels == 16
        && cfg.heads == 2
        && cfg.num_query == 5
        && cfg.tolerance == GRAD_TOL
        && cfg.sampling_mode == SamplingMode::Bilinear;
    let r = run_gradcheck(2024, &cfg).unwrap();
    let worst = r.cases.iter().map(|c| c.actual).fold(0.0, f64::max);
    let covered = [
        "sampling.bilinear.8x8.d_coords",
        "attention.bilinear.offset_proj.weight",
        "attention.bilinear.pyramid.level0",
    ]
    .iter()
    .all(|n| r.cases.iter().any(|c| c.name == *n));
    outcome(
        r.pass && shape_ok && covered && worst <= GRAD_TOL,
        format!(
            "{} tensors, worst relative error {worst:.2e} (tol {GRAD_TOL:.0e})",
            r.cases.len()
        ),
    )
}

fn discrete_contract() -> Outcome {
    let cfg = GradcheckConfig {
        sampling_mode: SamplingMode::Discrete,
        ..Default::default()
    };
    let r = run_gradcheck(2024, &cfg).unwrap();
    let zero_cases: Vec<_> = r
        .cases
        .iter()
        .filter(|c| {
            c.name.ends_with("d_coords")
                || c.name.contains("offset_proj")
                || c.name.ends_with("reference_points")
        })
        .collect();
    let zeros = zero_cases.len() == 6
        && zero_cases
            .iter()
            .all(|c| c.actual == 0.0 && c.tolerance == 0.0 && c.pass);

    let attn = DeformAttnConfig {
        heads: 2,
        points_per_level: vec![2, 2],
        num_query: 4,
        num_decoder: 2,
        embed_dim: 8,
        sampling_mode: SamplingMode::Bilinear,
    };
    let mut model = MiniDecoder::new(&attn, RAW_CHANNELS, 9).unwrap();
    model.set_sampling_mode(SamplingMode::Discrete);
    let frozen: Vec<DenseArray> = offset_tensors(&model);
    let mut opt = AdamWState::new(AdamWConfig::default(), model.tensors());
    let lrs = LrGroupTable::new(5e-3, 5e-3).unwrap();
    let spec = ToyTaskSpec::new(ToyTaskSpec::pyramid_shapes(12, 2), 4, 2, 8);
    let steps = 40;
    for seed in 0..steps {
        train_step(
            &mut model,
            &toy_task_generate(seed, &spec).unwrap(),
            &mut opt,
            &lrs,
        )
        .unwrap();
    }
    let unchanged = offset_tensors(&model)
        .iter()
        .zip(&frozen)
        .all(|(a, b)| a.bitwise_eq(b));
    let others_moved = model.checksum() != {
        let mut m = MiniDecoder::new(&attn, RAW_CHANNELS, 9).unwrap();
        m.set_sampling_mode(SamplingMode::Discrete);
        m.checksum()
    };
    outcome(
        zeros && unchanged && others_moved,
        format!(
            "{} exact-zero gradient cases; offsets bitwise unchanged over {steps} AdamW steps",
            zero_cases.len()
        ),
    )
}

fn offset_tensors(model: &MiniDecoder) -> Vec<DenseArray> {
    model
        .param_info()
        .iter()
        .zip(model.tensors())
        .filter(|(i, _)| i.is_offset)
        .map(|(_, t)| t.clone())
        .collect()
}

fn equivalence() -> Outcome {
    let suite = run_equivalence(2024).unwrap();
    let pixel_ok = suite
        .cases
        .iter()
        .filter(|c| c.name.starts_with("pixel_center"))
        .all(|c| c.pass && c.actual == 0.0);
    let mut worst: f64 = 0.0;
    for mode in [SamplingMode::Bilinear, SamplingMode::Discrete] {
        for seed in 0..50 {
            let inst = Instance::random(1000 + seed, mode);
            let slow = naive_msda(&inst.levels, &inst.emb, &inst.refs, &inst.params, &inst.cfg);
            worst = worst.max(rel_err(inst.forward().data(), slow.data()));
        }
    }
    outcome(
        suite.pass && pixel_ok && worst <= NAIVE_TOL,
        format!("pixel centers bitwise; 2x50 naive instances, worst relative error {worst:.2e} (tol {NAIVE_TOL:.0e})"),
    )
}

fn scheduler_boundary() -> Outcome {
    let policy = AugmentationPolicy::new(10, 2, AugmentOp::ALL.to_vec()).unwrap();
    let active: Vec<bool> = (0..10)
        .map(|e| !policy.schedule_for_epoch(e).unwrap().is_empty())
        .collect();
    let full = (0..8).all(|e| policy.schedule_for_epoch(e).unwrap() == AugmentOp::ALL);
    let pass = full && active == [true, true, true, true, true, true, true, true, false, false];
    outcome(pass, "strong ops on for epochs 0-7, off for 8-9")
}

fn ema() -> Outcome {
    let s0 = DenseArray::from_fn(&[16], |i| 0.5 + i as f64 / 32.0);
    let p = DenseArray::from_fn(&[16], |i| 2.0 - i as f64 / 64.0);
    let d: f64 = 0.9999;
    let n = 3000;
    let mut state = EmaState::new([&s0], d).unwrap();
    for _ in 0..n {
        state = ema_update(state, [&p]).unwrap();
    }
    let dn = d.powi(n);
    let worst = state.shadow[0]
        .data()
        .iter()
        .zip(s0.data().iter().zip(p.data()))
        .map(|(s, (a, b))| {
            let closed = a * dn + b * (1.0 - dn);
            ((s - closed) / closed).abs()
        })
        .fold(0.0, f64::max);
    outcome(
        worst <= EMA_TOL,
        format!("{n} updates at d = {d}, worst relative error {worst:.2e} (tol {EMA_TOL:.0e})"),
    )
}

fn two_phase_training() -> Outcome {
    let policy = TrainPolicy::default();
    let ratio_ok = policy.epochs_pretrain == 6 * policy.epochs_finetune;
    let (a, _) = run_two_phase_training(7, &policy).unwrap();
    let (b, _) = run_two_phase_training(7, &policy).unwrap();
    let deterministic =
        a.to_jsonl() == b.to_jsonl() && a.final_loss.to_bits() == b.final_loss.to_bits();
    let ratio = a.final_loss / a.initial_loss;
    let boundary = a
        .epochs
        .iter()
        .all(|e| (e.phase == Phase::Pretrain) == (e.epoch < policy.epochs_pretrain));
    let pass = ratio_ok
        && deterministic
        && a.aborted.is_none()
        && a.swap_preserved_weights()
        && boundary
        && ratio <= LOSS_RATIO;
    outcome(
        pass,
        format!(
            "{}:{} epochs, loss {:.4} -> {:.4} (ratio {ratio:.4}, bound {LOSS_RATIO}), swap bitwise, repeat identical",
            policy.epochs_pretrain, policy.epochs_finetune, a.initial_loss, a.final_loss
        ),
    )
}

fn benchmark() -> Outcome {
    let cfg = BenchConfig {
        pyramids: BenchConfig::parse_pyramids(
            "20x20,10x10,5x5;40x40,20x20,10x10;80x80,40x40,20x20",
        )
        .unwrap(),
        head_dim: 8,
        num_query: 100,
        iterations: 30,
        warmup: 2,
        ..Default::default()
    };
    let r = run_bench(1, &cfg).unwrap();
    let pyramids: std::collections::BTreeSet<_> =
        r.bench.iter().map(|b| b.pyramid.clone()).collect();
    let speedups: Vec<String> = r
        .bench
        .iter()
        .filter(|b| b.mode == SamplingMode::Discrete && b.budget_scaling.is_none())
        .map(|b| format!("{:.2}", b.speedup_discrete_over_bilinear))
        .collect();
    outcome(
        r.pass && pyramids.len() >= 3,
        format!(
            "{} pyramids, discrete/bilinear speedup {} (recorded, not asserted)",
            pyramids.len(),
            speedups.join(", ")
        ),
    )
}

fn main() -> ExitCode {
    type Check = fn() -> Outcome;
    let checks: [(&str, Duration, Check); 9] = [
        ("point-budget-totals", Duration::from_secs(1), point_totals),
        ("lr-group-rows", Duration::from_secs(1), lr_groups),
        ("gradient-suite", Duration::from_secs(120), gradient_suite),
        (
            "discrete-contract",
            Duration::from_secs(60),
            discrete_contract,
        ),
        ("equivalence-oracle", Duration::from_secs(60), equivalence),
        (
            "scheduler-boundary",
            Duration::from_secs(1),
            scheduler_boundary,
        ),
        ("ema-closed-form", Duration::from_secs(1), ema),
        (
            "two-phase-training",
            Duration::from_secs(300),
            two_phase_training,
        ),
        ("benchmark-harness", Duration::from_secs(120), benchmark),
    ];
    let mut failed = 0;
    for (name, budget, check) in checks {
        let start = Instant::now();
        let o = check();
        let elapsed = start.elapsed();
        let pass = o.pass && elapsed <= budget;
        if !pass {
            failed += 1;
        }
        println!(
            "{} {name:<24} {} [{:.2}s, budget {}s]",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("acceptance: {} of 9 passed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
