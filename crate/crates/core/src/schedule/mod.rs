//! Training-strategy utilities: epoch-gated strong augmentation, per-size
//! learning-rate groups and weight EMA.

pub mod augment;
pub mod ema;
pub mod policy;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use augment::{
    multiscale_select, photometric_distort, random_iou_crop, random_zoom_out, resize_to,
    ImageSample, IouCropParams, PhotometricParams, ZoomOutParams, DEFAULT_SIZES,
};

pub use ema::{ema_update, EmaState};
pub use policy::TrainPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOp {
    PhotometricDistort,
    ZoomOut,
    IouCrop,
    MultiscaleInput,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 4] = [
        AugmentOp::PhotometricDistort,
        AugmentOp::ZoomOut,
        AugmentOp::IouCrop,
        AugmentOp::MultiscaleInput,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AugmentOp::PhotometricDistort => "photometric_distort",
            AugmentOp::ZoomOut => "zoom_out",
            AugmentOp::IouCrop => "iou_crop",
            AugmentOp::MultiscaleInput => "multiscale_input",
        }
    }
}

impl std::fmt::Display for AugmentOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AugmentOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AugmentOp::ALL
            .into_iter()
            .find(|op| op.as_str() == s.trim())
            .ok_or_else(|| Error::Parse(format!("unknown augmentation op {s:?}")))
    }
}

/// Strong augmentation stays on until the final `cutoff` epochs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    total_epochs: usize,
    cutoff: usize,
    strong_ops: Vec<AugmentOp>,
}

impl AugmentationPolicy {
    pub fn new(total_epochs: usize, cutoff: usize, strong_ops: Vec<AugmentOp>) -> Result<Self> {
        if cutoff >= total_epochs {
            return Err(Error::InvalidArgument(format!(
                "cutoff {cutoff} must be below total_epochs {total_epochs}"
            )));
        }
        Ok(Self {
            total_epochs,
            cutoff,
            strong_ops,
        })
    }

    /// All four strong ops, switched off for the last two epochs.
    pub fn standard(total_epochs: usize) -> Result<Self> {
        Self::new(total_epochs, 2, AugmentOp::ALL.to_vec())
    }

    pub fn total_epochs(&self) -> usize {
        self.total_epochs
    }

    pub fn cutoff(&self) -> usize {
        self.cutoff
    }

    pub fn strong_ops(&self) -> &[AugmentOp] {
        &self.strong_ops
    }

    /// The strong ops active in `epoch`; empty during the final `cutoff` epochs.
    pub fn schedule_for_epoch(&self, epoch: usize) -> Result<Vec<AugmentOp>> {
        if epoch >= self.total_epochs {
            return Err(Error::InvalidArgument(format!(
                "epoch {epoch} outside 0..{}",
                self.total_epochs
            )));
        }
        if epoch < self.total_epochs - self.cutoff {
            Ok(self.strong_ops.clone())
        } else {
            Ok(Vec::new())
        }
    }
}

pub fn schedule_for_epoch(policy: &AugmentationPolicy, epoch: usize) -> Result<Vec<AugmentOp>> {
    policy.schedule_for_epoch(epoch)
}

/// Operator parameters for [`apply_augmentations`].
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    pub photometric: PhotometricParams,
    pub zoom_out: ZoomOutParams,
    pub iou_crop: IouCropParams,
    pub sizes: Vec<usize>,
    /// Square input size used whenever multi-scale input is off.
    pub fixed_size: usize,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            photometric: PhotometricParams::default(),
            zoom_out: ZoomOutParams::default(),
            iou_crop: IouCropParams::default(),
            sizes: DEFAULT_SIZES.to_vec(),
            fixed_size: 640,
        }
    }
}

/// Runs the active strong ops in pipeline order and then the final square
/// resize, which is always applied.
pub fn apply_augmentations(
    s: &ImageSample,
    rng: &mut impl Rng,
    active: &[AugmentOp],
    params: &AugmentParams,
) -> Result<ImageSample> {
    let mut out = s.clone();
    if active.contains(&AugmentOp::PhotometricDistort) {
        out = photometric_distort(&out, rng, &params.photometric);
    }
    if active.contains(&AugmentOp::ZoomOut) {
        out = random_zoom_out(&out, rng, &params.zoom_out);
    }
    if active.contains(&AugmentOp::IouCrop) {
        out = random_iou_crop(&out, rng, &params.iou_crop);
    }
    let size = if active.contains(&AugmentOp::MultiscaleInput) {
        multiscale_select(rng, &params.sizes)?
    } else {
        params.fixed_size
    };
    resize_to(&out, size, size)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelSize {
    S,
    M,
    L,
    X,
}

impl ModelSize {
    pub const ALL: [ModelSize; 4] = [ModelSize::S, ModelSize::M, ModelSize::L, ModelSize::X];
}

impl std::fmt::Display for ModelSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelSize::S => "S",
            ModelSize::M => "M",
            ModelSize::L => "L",
            ModelSize::X => "X",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ModelSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "S" => Ok(ModelSize::S),
            "M" => Ok(ModelSize::M),
            "L" => Ok(ModelSize::L),
            "X" => Ok(ModelSize::X),
            other => Err(Error::Parse(format!(
                "unknown model size {other:?} (expected S, M, L or X)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Backbone,
    Detector,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Detector => "detector",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrGroupTable {
    rates: BTreeMap<ParamGroup, f64>,
}

impl LrGroupTable {
    pub fn new(backbone: f64, detector: f64) -> Result<Self> {
        for (name, rate) in [("backbone", backbone), ("detector", detector)] {
            if !(rate > 0.0 && rate.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "{name} learning rate must be positive, got {rate}"
                )));
            }
        }
        Ok(Self {
            rates: BTreeMap::from([
                (ParamGroup::Backbone, backbone),
                (ParamGroup::Detector, detector),
            ]),
        })
    }

    pub fn rate(&self, group: ParamGroup) -> f64 {
        self.rates[&group]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamGroup, f64)> + '_ {
        self.rates.iter().map(|(g, r)| (*g, *r))
    }
}

/// Scale-adaptive learning rates: the detector group always uses 1e-4, the
/// backbone rate falls as the backbone grows.
pub fn build_param_groups(size: ModelSize) -> LrGroupTable {
    let backbone = match size {
        ModelSize::S => 1e-4,
        ModelSize::M => 5e-5,
        ModelSize::L => 1e-5,
        ModelSize::X => 1e-6,
    };
    LrGroupTable::new(backbone, 1e-4).expect("table rates are positive")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cutoff_must_leave_training_epochs() {
        assert!(AugmentationPolicy::new(2, 2, AugmentOp::ALL.to_vec()).is_err());
        assert!(AugmentationPolicy::new(3, 2, AugmentOp::ALL.to_vec()).is_ok());
    }

    #[test]
    fn epoch_out_of_range() {
        let p = AugmentationPolicy::standard(10).unwrap();
        assert!(p.schedule_for_epoch(10).is_err());
    }

    #[test]
    fn zero_cutoff_keeps_ops_on() {
        let p = AugmentationPolicy::new(5, 0, AugmentOp::ALL.to_vec()).unwrap();
        for e in 0..5 {
            assert_eq!(p.schedule_for_epoch(e).unwrap().len(), 4);
        }
    }

    #[test]
    fn op_names_round_trip() {
        for op in AugmentOp::ALL {
            assert_eq!(op.as_str().parse::<AugmentOp>().unwrap(), op);
        }
        assert!("mosaic".parse::<AugmentOp>().is_err());
    }

    #[test]
    fn unknown_model_size() {
        assert!("XL".parse::<ModelSize>().is_err());
        assert_eq!("m".parse::<ModelSize>().unwrap(), ModelSize::M);
    }

    #[test]
    fn nonpositive_rates_rejected() {
        assert!(LrGroupTable::new(0.0, 1e-4).is_err());
        assert!(LrGroupTable::new(1e-4, f64::NAN).is_err());
    }
}
