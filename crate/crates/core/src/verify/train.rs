use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::decoder::train::{run_two_phase_training, Phase, TrainingReport};
use crate::error::Result;
use crate::sampling::SamplingMode;
use crate::schedule::{build_param_groups, ParamGroup, TrainPolicy};

use super::{digest_str, CaseRecord, Report};

/// Final evaluation loss must be at most this fraction of the initial one.
pub const LOSS_RATIO_BOUND: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub phase_boundary: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub loss_ratio: f64,
    pub checksum_before_swap: String,
    pub checksum_after_swap: String,
    pub ema_updates: u64,
    pub lr_by_group: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
}

/// Runs two-phase training under `policy` and checks the log: the mode swap
/// and its position, frozen offsets through fine-tuning, the augmentation
/// cutoff, the learning-rate table and the loss reduction.
pub fn run_train_toy(seed: u64, policy: &TrainPolicy) -> Result<(Report, TrainingReport)> {
    let (log, _) = run_two_phase_training(seed, policy)?;
    let digest = digest_str(&format!("{}|seed={seed}", policy.to_kv()));
    let total = policy.total_epochs();
    let mut cases = vec![CaseRecord::check(
        "completed",
        &digest,
        log.aborted.is_none() && log.epochs.len() == total,
    )
    .detail(
        log.aborted
            .clone()
            .unwrap_or_else(|| format!("{} epochs", log.epochs.len())),
    )];

    let boundary_ok = log.epochs.iter().all(|e| {
        let pre = e.epoch < policy.epochs_pretrain;
        let expected = if pre {
            (Phase::Pretrain, SamplingMode::Bilinear)
        } else {
            (Phase::Finetune, SamplingMode::Discrete)
        };
        (e.phase, e.mode) == expected
    });
    cases.push(
        CaseRecord::check(
            "phase_boundary",
            &digest,
            boundary_ok && log.phase_boundary == policy.epochs_pretrain,
        )
        .detail(format!(
            "fine-tuning starts at epoch {}",
            log.phase_boundary
        )),
    );
    cases.push(
        CaseRecord::check(
            "swap_preserves_weights",
            &digest,
            log.swap_preserved_weights(),
        )
        .detail(format!(
            "{} -> {}",
            log.checksum_before_swap, log.checksum_after_swap
        )),
    );

    let frozen_reference = log
        .epochs
        .iter()
        .rev()
        .find(|e| e.phase == Phase::Pretrain)
        .map(|e| &e.offset_checksum);
    let finetune: Vec<_> = log
        .epochs
        .iter()
        .filter(|e| e.phase == Phase::Finetune)
        .collect();
    let frozen_ok = !finetune.is_empty()
        && finetune
            .iter()
            .all(|e| Some(&e.offset_checksum) == frozen_reference);
    cases.push(
        CaseRecord::check("offsets_frozen_in_finetune", &digest, frozen_ok).detail(format!(
            "offset checksums {:?}",
            finetune
                .iter()
                .map(|e| e.offset_checksum.as_str())
                .collect::<Vec<_>>()
        )),
    );

    let cutoff_start = total - policy.cutoff;
    let augment_ok = log.epochs.iter().all(|e| {
        if e.epoch < cutoff_start {
            e.strong_augment == policy.ops
        } else {
            e.strong_augment.is_empty() && e.input_sizes.iter().all(|&s| s == policy.fixed_size)
        }
    });
    cases.push(
        CaseRecord::check("augmentation_cutoff", &digest, augment_ok)
            .detail(format!("strong augmentation off from epoch {cutoff_start}")),
    );

    let table = build_param_groups(policy.model_size);
    let expected_lr: BTreeMap<String, f64> = table
        .iter()
        .map(|(g, r)| {
            let over = match g {
                ParamGroup::Backbone => policy.lr_backbone,
                ParamGroup::Detector => policy.lr_detector,
            };
            (g.as_str().to_string(), over.unwrap_or(r))
        })
        .collect();
    let lr_ok = log.epochs.iter().all(|e| e.lr_by_group == expected_lr);
    cases.push(
        CaseRecord::check("lr_table", &digest, lr_ok && !log.epochs.is_empty()).detail(format!(
            "model size {} rates {expected_lr:?}",
            policy.model_size
        )),
    );

    let ratio = log.final_loss / log.initial_loss;
    cases.push(
        CaseRecord::at_most("loss_reduction", &digest, LOSS_RATIO_BOUND, ratio, 0.0).detail(
            format!(
                "initial {:.6} final {:.6}",
                log.initial_loss, log.final_loss
            ),
        ),
    );

    let mut report = Report::new("train-toy", seed, cases);
    report.training = Some(TrainSummary {
        epochs: log.epochs.len(),
        phase_boundary: log.phase_boundary,
        initial_loss: log.initial_loss,
        final_loss: log.final_loss,
        loss_ratio: ratio,
        checksum_before_swap: log.checksum_before_swap.clone(),
        checksum_after_swap: log.checksum_after_swap.clone(),
        ema_updates: log.ema_updates,
        lr_by_group: expected_lr,
        aborted: log.aborted.clone(),
    });
    Ok((report, log))
}
