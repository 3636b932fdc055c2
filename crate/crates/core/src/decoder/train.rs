//! Optimizer steps and the two-phase schedule: bilinear pretraining, one mode
//! swap, then discrete fine-tuning with frozen offset predictors.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::array::DenseArray;
use crate::attention::DeformAttnConfig;
use crate::error::{Error, Result};
use crate::optim::{AdamWConfig, AdamWState};
use crate::sampling::SamplingMode;
use crate::schedule::augment::multiscale_select;
use crate::schedule::{AugmentOp, EmaState, LrGroupTable, ParamGroup, TrainPolicy};

use super::toy::{toy_task_generate, ToyInstance, ToyTaskSpec, RAW_CHANNELS};
use super::{decoder_backward, decoder_forward_cached, mse_loss, MiniDecoder};

const EVAL_SALT: u64 = 0x5eed_e7a1;
const DATA_SALT: u64 = 0xda7a;

/// One forward/backward pass and one AdamW update. Each tensor uses the rate
/// of its parameter group; frozen offset predictors are skipped.
pub fn train_step(
    model: &mut MiniDecoder,
    instance: &ToyInstance,
    optimizer: &mut AdamWState,
    lr_groups: &LrGroupTable,
) -> Result<f64> {
    let (pred, cache) = decoder_forward_cached(model, &instance.pyramid, &instance.queries)?;
    let (loss, d_pred) = mse_loss(&pred, &instance.targets)?;
    if !loss.is_finite() {
        return Err(Error::Divergence { loss });
    }
    let grads = decoder_backward(model, &cache, &d_pred)?;
    let info = model.param_info();
    let lrs: Vec<f64> = info.iter().map(|i| lr_groups.rate(i.group)).collect();
    let frozen: Vec<bool> = info.iter().map(|i| i.frozen).collect();
    optimizer.step(&mut model.tensors_mut(), &grads, &lrs, &frozen)?;
    Ok(loss)
}

pub fn evaluate(model: &MiniDecoder, instance: &ToyInstance) -> Result<f64> {
    let (pred, _) = decoder_forward_cached(model, &instance.pyramid, &instance.queries)?;
    Ok(mse_loss(&pred, &instance.targets)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub mode: SamplingMode,
    /// Mean training loss over the epoch's steps.
    pub loss: f64,
    /// Loss on the fixed evaluation batch after the epoch.
    pub eval_loss: f64,
    pub lr_by_group: BTreeMap<String, f64>,
    pub offset_checksum: String,
    pub strong_augment: Vec<AugmentOp>,
    /// Finest-level input size of every step in the epoch.
    pub input_sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingReport {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// Evaluation loss before any update.
    pub initial_loss: f64,
    /// Evaluation loss after the last epoch, in the final sampling mode.
    pub final_loss: f64,
    /// First fine-tuning epoch.
    pub phase_boundary: usize,
    pub checksum_before_swap: String,
    pub checksum_after_swap: String,
    pub ema_updates: u64,
    /// Set when training stopped early.
    pub aborted: Option<String>,
}

impl TrainingReport {
    pub fn swap_preserved_weights(&self) -> bool {
        !self.checksum_before_swap.is_empty()
            && self.checksum_before_swap == self.checksum_after_swap
    }

    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("epoch record serializes") + "\n")
            .collect()
    }
}

pub fn decoder_config(policy: &TrainPolicy) -> DeformAttnConfig {
    DeformAttnConfig {
        heads: policy.heads,
        points_per_level: policy.points_per_level.clone(),
        num_query: policy.num_queries,
        num_decoder: policy.num_decoder,
        embed_dim: policy.embed_dim,
        sampling_mode: SamplingMode::Bilinear,
    }
}

/// Bilinear pretraining for `policy.epochs_pretrain` epochs, a single switch
/// to discrete sampling, then `policy.epochs_finetune` fine-tuning epochs.
///
/// Strong augmentation gates multi-scale input: while it is active each step
/// draws its finest-level size from `policy.sizes`, afterwards every step
/// uses `policy.fixed_size`. Divergence stops the run and is recorded in the
/// returned report.
pub fn run_two_phase_training(
    seed: u64,
    policy: &TrainPolicy,
) -> Result<(TrainingReport, MiniDecoder)> {
    policy.validate()?;
    let augmentation = policy.augmentation_policy()?;
    let table = policy.lr_table()?;
    let effective = LrGroupTable::new(
        table.rate(ParamGroup::Backbone) * policy.lr_scale,
        table.rate(ParamGroup::Detector) * policy.lr_scale,
    )?;
    let lr_by_group: BTreeMap<String, f64> = table
        .iter()
        .map(|(g, r)| (g.as_str().to_string(), r))
        .collect();

    let cfg = decoder_config(policy);
    let levels = cfg.num_levels();
    let mut model = MiniDecoder::new(&cfg, RAW_CHANNELS, seed)?;
    let mut optimizer = AdamWState::new(
        AdamWConfig {
            weight_decay: policy.weight_decay,
            ..AdamWConfig::default()
        },
        model.tensors(),
    );
    let mut ema = EmaState::new(model.tensors(), policy.ema_decay)?;

    let spec_for = |size: usize, batch: usize| {
        ToyTaskSpec::new(
            ToyTaskSpec::pyramid_shapes(size, levels),
            policy.num_queries,
            batch,
            policy.embed_dim,
        )
    };
    let eval_set = toy_task_generate(
        seed ^ EVAL_SALT,
        &spec_for(policy.fixed_size, 2 * policy.batch_size),
    )?;
    let initial_loss = evaluate(&model, &eval_set)?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(DATA_SALT));

    let mut report = TrainingReport {
        seed,
        epochs: Vec::new(),
        initial_loss,
        final_loss: f64::NAN,
        phase_boundary: policy.epochs_pretrain,
        checksum_before_swap: String::new(),
        checksum_after_swap: String::new(),
        ema_updates: 0,
        aborted: None,
    };

    for epoch in 0..policy.total_epochs() {
        if epoch == policy.epochs_pretrain {
            report.checksum_before_swap = model.checksum();
            model.set_sampling_mode(SamplingMode::Discrete);
            report.checksum_after_swap = model.checksum();
        }
        let phase = if epoch < policy.epochs_pretrain {
            Phase::Pretrain
        } else {
            Phase::Finetune
        };
        let active = augmentation.schedule_for_epoch(epoch)?;
        let multiscale = active.contains(&AugmentOp::MultiscaleInput);
        let mut total = 0.0;
        let mut sizes = Vec::with_capacity(policy.steps_per_epoch);
        for _ in 0..policy.steps_per_epoch {
            let size = if multiscale {
                multiscale_select(&mut data_rng, &policy.sizes)?
            } else {
                policy.fixed_size
            };
            let instance =
                toy_task_generate(data_rng.random(), &spec_for(size, policy.batch_size))?;
            match train_step(&mut model, &instance, &mut optimizer, &effective) {
                Ok(loss) => total += loss,
                Err(Error::Divergence { loss }) => {
                    report.aborted = Some(format!("non-finite loss {loss} in epoch {epoch}"));
                    report.ema_updates = ema.updates;
                    return Ok((report, model));
                }
                Err(e) => return Err(e),
            }
            ema.update(model.tensors())?;
            sizes.push(size);
        }
        report.epochs.push(EpochRecord {
            epoch,
            phase,
            mode: model.sampling_mode(),
            loss: total / policy.steps_per_epoch as f64,
            eval_loss: evaluate(&model, &eval_set)?,
            lr_by_group: lr_by_group.clone(),
            offset_checksum: model.offset_checksum(),
            strong_augment: active,
            input_sizes: sizes,
        });
    }
    report.final_loss = evaluate(&model, &eval_set)?;
    report.ema_updates = ema.updates;
    Ok((report, model))
}

/// Gradient of the scalar training loss for every tensor, used by checks that
/// compare against finite differences.
pub fn loss_and_grads(
    model: &MiniDecoder,
    instance: &ToyInstance,
) -> Result<(f64, Vec<DenseArray>)> {
    let (pred, cache) = decoder_forward_cached(model, &instance.pyramid, &instance.queries)?;
    let (loss, d_pred) = mse_loss(&pred, &instance.targets)?;
    Ok((loss, decoder_backward(model, &cache, &d_pred)?))
}
