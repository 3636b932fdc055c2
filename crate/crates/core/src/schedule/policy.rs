//! The plain-text policy file driving a training run.
//!
//! ```text
//! epochs_pretrain = 12
//! epochs_finetune = 2
//! cutoff = 2
//! ops = photometric_distort,zoom_out,iou_crop,multiscale_input
//! sizes = 12,16,20
//! fixed_size = 16
//! model_size = S
//! ```
//!
//! Every key is optional; see [`TrainPolicy::default`].

use crate::error::{Error, Result};
use crate::kv::{join_list, KvFile};

use super::{
    build_param_groups, AugmentOp, AugmentParams, AugmentationPolicy, LrGroupTable, ModelSize,
};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPolicy {
    pub epochs_pretrain: usize,
    pub epochs_finetune: usize,
    pub cutoff: usize,
    pub ops: Vec<AugmentOp>,
    /// Candidate finest-level sizes while multi-scale input is on.
    pub sizes: Vec<usize>,
    /// Finest-level size once multi-scale input is off, also used for evaluation.
    pub fixed_size: usize,
    pub model_size: ModelSize,
    pub lr_backbone: Option<f64>,
    pub lr_detector: Option<f64>,
    /// Multiplier applied to the table rates for the toy task.
    pub lr_scale: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub num_queries: usize,
    pub heads: usize,
    pub points_per_level: Vec<usize>,
    pub embed_dim: usize,
    pub num_decoder: usize,
    pub zoom_max_ratio: f64,
    pub brightness: f64,
}

impl Default for TrainPolicy {
    fn default() -> Self {
        Self {
            epochs_pretrain: 12,
            epochs_finetune: 2,
            cutoff: 2,
            ops: AugmentOp::ALL.to_vec(),
            sizes: vec![12, 16, 20],
            fixed_size: 16,
            model_size: ModelSize::S,
            lr_backbone: None,
            lr_detector: None,
            lr_scale: 50.0,
            weight_decay: 1e-4,
            ema_decay: super::ema::DEFAULT_DECAY,
            steps_per_epoch: 8,
            batch_size: 4,
            num_queries: 4,
            heads: 2,
            points_per_level: vec![2, 2, 2],
            embed_dim: 16,
            num_decoder: 2,
            zoom_max_ratio: 4.0,
            brightness: 32.0 / 255.0,
        }
    }
}

const KEYS: &[&str] = &[
    "epochs_pretrain",
    "epochs_finetune",
    "total_epochs",
    "cutoff",
    "ops",
    "sizes",
    "fixed_size",
    "model_size",
    "lr_backbone",
    "lr_detector",
    "lr_scale",
    "weight_decay",
    "ema_decay",
    "steps_per_epoch",
    "batch_size",
    "num_queries",
    "heads",
    "points_per_level",
    "embed_dim",
    "num_decoder",
    "zoom_max_ratio",
    "brightness",
];

impl TrainPolicy {
    pub fn total_epochs(&self) -> usize {
        self.epochs_pretrain + self.epochs_finetune
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = KvFile::parse(text)?;
        kv.reject_unknown(KEYS)?;
        let d = Self::default();
        let policy = Self {
            epochs_pretrain: kv.get("epochs_pretrain")?.unwrap_or(d.epochs_pretrain),
            epochs_finetune: kv.get("epochs_finetune")?.unwrap_or(d.epochs_finetune),
            cutoff: kv.get("cutoff")?.unwrap_or(d.cutoff),
            ops: kv.get_list("ops")?.unwrap_or(d.ops),
            sizes: kv.get_list("sizes")?.unwrap_or(d.sizes),
            fixed_size: kv.get("fixed_size")?.unwrap_or(d.fixed_size),
            model_size: kv.get("model_size")?.unwrap_or(d.model_size),
            lr_backbone: kv.get("lr_backbone")?,
            lr_detector: kv.get("lr_detector")?,
            lr_scale: kv.get("lr_scale")?.unwrap_or(d.lr_scale),
            weight_decay: kv.get("weight_decay")?.unwrap_or(d.weight_decay),
            ema_decay: kv.get("ema_decay")?.unwrap_or(d.ema_decay),
            steps_per_epoch: kv.get("steps_per_epoch")?.unwrap_or(d.steps_per_epoch),
            batch_size: kv.get("batch_size")?.unwrap_or(d.batch_size),
            num_queries: kv.get("num_queries")?.unwrap_or(d.num_queries),
            heads: kv.get("heads")?.unwrap_or(d.heads),
            points_per_level: kv
                .get_list("points_per_level")?
                .unwrap_or(d.points_per_level),
            embed_dim: kv.get("embed_dim")?.unwrap_or(d.embed_dim),
            num_decoder: kv.get("num_decoder")?.unwrap_or(d.num_decoder),
            zoom_max_ratio: kv.get("zoom_max_ratio")?.unwrap_or(d.zoom_max_ratio),
            brightness: kv.get("brightness")?.unwrap_or(d.brightness),
        };
        if let Some(total) = kv.get::<usize>("total_epochs")? {
            if total != policy.total_epochs() {
                return Err(Error::Parse(format!(
                    "total_epochs = {total} but epochs_pretrain + epochs_finetune = {}",
                    policy.total_epochs()
                )));
            }
        }
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.epochs_pretrain == 0 || self.epochs_finetune == 0 {
            return bad("both training phases need at least one epoch".into());
        }
        if self.steps_per_epoch == 0 || self.batch_size == 0 || self.num_queries == 0 {
            return bad("steps_per_epoch, batch_size and num_queries must be positive".into());
        }
        if self.sizes.is_empty() || self.sizes.iter().chain([&self.fixed_size]).any(|&s| s < 4) {
            return bad("sizes must be nonempty and every size at least 4".into());
        }
        if self.lr_scale.is_nan()
            || self.lr_scale <= 0.0
            || !(0.0..1.0).contains(&self.ema_decay)
            || self.ema_decay == 0.0
        {
            return bad("lr_scale must be positive and ema_decay in (0, 1)".into());
        }
        self.augmentation_policy()?;
        self.lr_table()?;
        Ok(())
    }

    pub fn augmentation_policy(&self) -> Result<AugmentationPolicy> {
        AugmentationPolicy::new(self.total_epochs(), self.cutoff, self.ops.clone())
    }

    /// The size table with any explicit overrides applied.
    pub fn lr_table(&self) -> Result<LrGroupTable> {
        let base = build_param_groups(self.model_size);
        LrGroupTable::new(
            self.lr_backbone
                .unwrap_or(base.rate(super::ParamGroup::Backbone)),
            self.lr_detector
                .unwrap_or(base.rate(super::ParamGroup::Detector)),
        )
    }

    pub fn augment_params(&self) -> AugmentParams {
        let mut p = AugmentParams::default();
        p.zoom_out.max_ratio = self.zoom_max_ratio;
        p.photometric.brightness = self.brightness;
        p.sizes = self.sizes.clone();
        p.fixed_size = self.fixed_size;
        p
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::default();
        kv.insert("epochs_pretrain", self.epochs_pretrain);
        kv.insert("epochs_finetune", self.epochs_finetune);
        kv.insert("cutoff", self.cutoff);
        kv.insert("ops", join_list(&self.ops));
        kv.insert("sizes", join_list(&self.sizes));
        kv.insert("fixed_size", self.fixed_size);
        kv.insert("model_size", self.model_size);
        if let Some(v) = self.lr_backbone {
            kv.insert("lr_backbone", v);
        }
        if let Some(v) = self.lr_detector {
            kv.insert("lr_detector", v);
        }
        kv.insert("lr_scale", self.lr_scale);
        kv.insert("weight_decay", self.weight_decay);
        kv.insert("ema_decay", self.ema_decay);
        kv.insert("steps_per_epoch", self.steps_per_epoch);
        kv.insert("batch_size", self.batch_size);
        kv.insert("num_queries", self.num_queries);
        kv.insert("heads", self.heads);
        kv.insert("points_per_level", join_list(&self.points_per_level));
        kv.insert("embed_dim", self.embed_dim);
        kv.insert("num_decoder", self.num_decoder);
        kv.insert("zoom_max_ratio", self.zoom_max_ratio);
        kv.insert("brightness", self.brightness);
        kv
    }
}
