//! Multi-scale deformable attention with per-level sampling-point budgets,
//! interchangeable bilinear and discrete sampling backends, hand-written
//! backward passes, and the training-schedule utilities around them.

pub mod array;
pub mod attention;
pub mod decoder;
pub mod error;
pub mod fixture;
pub mod kv;
pub mod layers;
pub mod optim;
pub mod pyramid;
pub mod sampling;
pub mod schedule;
pub mod verify;

pub use array::DenseArray;
pub use attention::{
    compute_sampling_locations, count_sampling_points, init_params, msda_backward, msda_forward,
    set_sampling_mode, validate_config, AttnGrads, AttnIntermediates, DeformAttnConfig,
    DeformAttnParams,
};
pub use error::{ConfigError, Error, Result};
pub use pyramid::{
    flatten_pyramid, unflatten_pyramid, FeatureLevel, FeaturePyramid, FlatPyramid, QueryBatch,
    SpatialShape,
};
pub use sampling::{SampleGrads, SamplingMode};
