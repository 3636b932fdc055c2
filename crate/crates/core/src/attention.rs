//! Multi-scale deformable attention with a separate sampling-point budget per
//! pyramid level.
//!
//! Offset and attention-logit projections are laid out head-major, then
//! level-major: for head `h`, level `l`, point `k` the point slot is
//! `p = Σ_{l'<l} K_l' + k`, the logit lives at `h·P + p` and the offset pair
//! at `2·(h·P + p)`, with `P = ΣK_l`. The softmax runs jointly over all `P`
//! slots of a head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::array::DenseArray;
use crate::error::{ConfigError, Error, Result};
use crate::fixture::{Fixture, Precision};
use crate::kv::{join_list, KvFile};
use crate::layers::{softmax_into, Linear, LinearGrads};
use crate::pyramid::{
    flatten_pyramid, level_start_index, unflatten_pyramid, FeaturePyramid, QueryBatch, SpatialShape,
};
use crate::sampling::{
    bilinear_backward_at, bilinear_sample_into, discrete_backward_at, discrete_sample_into,
    MapLayout, SamplingMode,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeformAttnConfig {
    pub heads: usize,
    pub points_per_level: Vec<usize>,
    pub num_query: usize,
    pub num_decoder: usize,
    pub embed_dim: usize,
    pub sampling_mode: SamplingMode,
}

impl Default for DeformAttnConfig {
    fn default() -> Self {
        Self {
            heads: 8,
            points_per_level: vec![4, 4, 4],
            num_query: 300,
            num_decoder: 3,
            embed_dim: 256,
            sampling_mode: SamplingMode::Bilinear,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "heads",
    "points_per_level",
    "num_query",
    "num_decoder",
    "embed_dim",
    "sampling_mode",
];

impl DeformAttnConfig {
    /// Total points per head and query, `ΣK_l`.
    pub fn total_points(&self) -> usize {
        self.points_per_level.iter().sum()
    }

    pub fn num_levels(&self) -> usize {
        self.points_per_level.len()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads.max(1)
    }

    /// First point slot of every level.
    pub fn level_point_offsets(&self) -> Vec<usize> {
        self.points_per_level
            .iter()
            .scan(0, |acc, k| {
                let start = *acc;
                *acc += k;
                Some(start)
            })
            .collect()
    }

    /// Checks that do not depend on a pyramid.
    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        if self.heads == 0 {
            return Err(ConfigError::NoHeads);
        }
        if self.total_points() == 0 {
            return Err(ConfigError::EmptyPointBudget);
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(ConfigError::HeadDivisibility {
                channels: self.embed_dim,
                heads: self.heads,
            });
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::default();
        kv.insert("heads", self.heads);
        kv.insert("points_per_level", join_list(&self.points_per_level));
        kv.insert("num_query", self.num_query);
        kv.insert("num_decoder", self.num_decoder);
        kv.insert("embed_dim", self.embed_dim);
        kv.insert("sampling_mode", self.sampling_mode);
        kv
    }

    /// Reads the config keys from `kv`, falling back to `base` for missing ones.
    /// Other keys are ignored.
    pub fn from_kv_with(kv: &KvFile, base: &DeformAttnConfig) -> Result<Self> {
        let cfg = Self {
            heads: kv.get("heads")?.unwrap_or(base.heads),
            points_per_level: kv
                .get_list("points_per_level")?
                .unwrap_or_else(|| base.points_per_level.clone()),
            num_query: kv.get("num_query")?.unwrap_or(base.num_query),
            num_decoder: kv.get("num_decoder")?.unwrap_or(base.num_decoder),
            embed_dim: kv.get("embed_dim")?.unwrap_or(base.embed_dim),
            sampling_mode: kv.get("sampling_mode")?.unwrap_or(base.sampling_mode),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = KvFile::parse(text)?;
        kv.reject_unknown(CONFIG_KEYS)?;
        Self::from_kv_with(&kv, &Self::default())
    }
}

/// Checks a config against the pyramid it will attend over.
pub fn validate_config(
    cfg: &DeformAttnConfig,
    p: &FeaturePyramid,
) -> std::result::Result<(), ConfigError> {
    if cfg.heads == 0 {
        return Err(ConfigError::NoHeads);
    }
    if cfg.points_per_level.len() != p.num_levels() {
        return Err(ConfigError::LevelCountMismatch {
            config: cfg.points_per_level.len(),
            pyramid: p.num_levels(),
        });
    }
    if cfg.total_points() == 0 {
        return Err(ConfigError::EmptyPointBudget);
    }
    if !p.channels().is_multiple_of(cfg.heads) {
        return Err(ConfigError::HeadDivisibility {
            channels: p.channels(),
            heads: cfg.heads,
        });
    }
    if cfg.embed_dim != p.channels() {
        return Err(ConfigError::EmbedDimMismatch {
            embed_dim: cfg.embed_dim,
            channels: p.channels(),
        });
    }
    Ok(())
}

/// `num_head × num_point × num_query × num_decoder`.
pub fn count_sampling_points(cfg: &DeformAttnConfig) -> u64 {
    [
        cfg.heads,
        cfg.total_points(),
        cfg.num_query,
        cfg.num_decoder,
    ]
    .iter()
    .map(|&v| v as u64)
    .product()
}

/// Per-level splits used for the point-budget ablation, keyed by `ΣK_l`.
pub fn points_preset(total: usize) -> Option<Vec<usize>> {
    match total {
        12 => Some(vec![4, 4, 4]),
        9 => Some(vec![4, 3, 2]),
        6 => Some(vec![2, 2, 2]),
        3 => Some(vec![1, 1, 1]),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeformAttnParams {
    pub value_proj: Linear,
    pub offset_proj: Linear,
    pub attn_proj: Linear,
    pub output_proj: Linear,
    /// When set, training steps must leave `offset_proj` untouched.
    pub offsets_frozen: bool,
}

const PARAM_NAMES: [&str; 8] = [
    "value_proj.weight",
    "value_proj.bias",
    "offset_proj.weight",
    "offset_proj.bias",
    "attn_proj.weight",
    "attn_proj.bias",
    "output_proj.weight",
    "output_proj.bias",
];

impl DeformAttnParams {
    pub fn tensors(&self) -> [&DenseArray; 8] {
        [
            &self.value_proj.weight,
            &self.value_proj.bias,
            &self.offset_proj.weight,
            &self.offset_proj.bias,
            &self.attn_proj.weight,
            &self.attn_proj.bias,
            &self.output_proj.weight,
            &self.output_proj.bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut DenseArray; 8] {
        [
            &mut self.value_proj.weight,
            &mut self.value_proj.bias,
            &mut self.offset_proj.weight,
            &mut self.offset_proj.bias,
            &mut self.attn_proj.weight,
            &mut self.attn_proj.bias,
            &mut self.output_proj.weight,
            &mut self.output_proj.bias,
        ]
    }

    pub fn named_tensors(&self) -> impl Iterator<Item = (&'static str, &DenseArray)> {
        PARAM_NAMES.into_iter().zip(self.tensors())
    }

    fn check_shapes(&self, cfg: &DeformAttnConfig) -> Result<()> {
        let (d, hp) = (cfg.embed_dim, cfg.heads * cfg.total_points());
        self.value_proj.weight.expect_shape(&[d, d], "value_proj")?;
        self.offset_proj
            .weight
            .expect_shape(&[2 * hp, d], "offset_proj")?;
        self.attn_proj.weight.expect_shape(&[hp, d], "attn_proj")?;
        self.output_proj
            .weight
            .expect_shape(&[d, d], "output_proj")?;
        Ok(())
    }

    pub fn to_fixture(&self) -> Fixture {
        let mut f = Fixture::new(Precision::F64);
        f.meta.insert("kind".into(), "deform_attn_params".into());
        f.meta
            .insert("offsets_frozen".into(), self.offsets_frozen.to_string());
        for (name, t) in self.named_tensors() {
            f.push(name, t.clone());
        }
        f
    }

    pub fn from_fixture(f: &Fixture) -> Result<Self> {
        let get = |name: &str| {
            f.section(name)
                .cloned()
                .ok_or_else(|| Error::Parse(format!("checkpoint missing section {name}")))
        };
        let linear = |prefix: &str| -> Result<Linear> {
            Ok(Linear {
                weight: get(&format!("{prefix}.weight"))?,
                bias: get(&format!("{prefix}.bias"))?,
            })
        };
        let offsets_frozen = match f.meta.get("offsets_frozen").map(String::as_str) {
            Some("true") => true,
            Some("false") | None => false,
            Some(other) => return Err(Error::Parse(format!("bad offsets_frozen {other:?}"))),
        };
        Ok(Self {
            value_proj: linear("value_proj")?,
            offset_proj: linear("offset_proj")?,
            attn_proj: linear("attn_proj")?,
            output_proj: linear("output_proj")?,
            offsets_frozen,
        })
    }
}

/// Deterministic initialization.
///
/// Offset weights start at zero with biases pointing head `h` along angle
/// `2πh/heads`, scaled by `1..=K_l` within each level. Attention logits start
/// at zero (uniform weights). Value and output projections draw weights
/// uniformly from `±1/√D` with zero bias.
pub fn init_params(cfg: &DeformAttnConfig, seed: u64) -> Result<DeformAttnParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.embed_dim;
    let p = cfg.total_points();
    let value_proj = Linear::fan_in_uniform(d, d, &mut rng);
    let output_proj = Linear::fan_in_uniform(d, d, &mut rng);
    let mut offset_proj = Linear::zeros(d, 2 * cfg.heads * p);
    let offsets = cfg.level_point_offsets();
    let bias = offset_proj.bias.data_mut();
    for h in 0..cfg.heads {
        let theta = 2.0 * std::f64::consts::PI * h as f64 / cfg.heads as f64;
        let (sin, cos) = theta.sin_cos();
        for (l, &k_l) in cfg.points_per_level.iter().enumerate() {
            for k in 0..k_l {
                let slot = 2 * (h * p + offsets[l] + k);
                let scale = (k + 1) as f64;
                bias[slot] = cos * scale;
                bias[slot + 1] = sin * scale;
            }
        }
    }
    Ok(DeformAttnParams {
        value_proj,
        offset_proj,
        attn_proj: Linear::zeros(d, cfg.heads * p),
        output_proj,
        offsets_frozen: cfg.sampling_mode == SamplingMode::Discrete,
    })
}

/// Switches the sampling backend. Moving to discrete sampling freezes the
/// offset predictor; moving back to bilinear releases it. Weights are never
/// touched.
pub fn set_sampling_mode(
    params: &mut DeformAttnParams,
    cfg: &mut DeformAttnConfig,
    mode: SamplingMode,
) {
    cfg.sampling_mode = mode;
    params.offsets_frozen = mode == SamplingMode::Discrete;
}

fn offsets_to_locations(
    offsets: &DenseArray,
    queries: &QueryBatch,
    cfg: &DeformAttnConfig,
    shapes: &[SpatialShape],
) -> Vec<DenseArray> {
    let (b, nq, heads, p) = (
        queries.batch(),
        queries.num_queries(),
        cfg.heads,
        cfg.total_points(),
    );
    let refs = queries.reference_points().data();
    let off = offsets.data();
    let starts = cfg.level_point_offsets();
    cfg.points_per_level
        .iter()
        .zip(shapes)
        .zip(&starts)
        .map(|((&k_l, shape), &start)| {
            let (w, h) = (shape.width as f64, shape.height as f64);
            let mut loc = DenseArray::zeros(&[b, nq, heads, k_l, 2]);
            let out = loc.data_mut();
            let mut i = 0;
            for bq in 0..b * nq {
                let (rx, ry) = (refs[2 * bq], refs[2 * bq + 1]);
                for hi in 0..heads {
                    for k in 0..k_l {
                        let slot = 2 * ((bq * heads + hi) * p + start + k);
                        out[i] = rx + off[slot] / w;
                        out[i + 1] = ry + off[slot + 1] / h;
                        i += 2;
                    }
                }
            }
            loc
        })
        .collect()
}

fn check_queries(queries: &QueryBatch, cfg: &DeformAttnConfig) -> Result<()> {
    if queries.dim() != cfg.embed_dim {
        return Err(Error::shape(format!(
            "query dim {} does not match embed_dim {}",
            queries.dim(),
            cfg.embed_dim
        )));
    }
    Ok(())
}

/// Sampling locations `(B, Nq, heads, K_l, 2)` for every level:
/// `reference + offset / (W_l, H_l)` with offsets in pixels of level `l`.
pub fn compute_sampling_locations(
    queries: &QueryBatch,
    params: &DeformAttnParams,
    cfg: &DeformAttnConfig,
    shapes: &[SpatialShape],
) -> Result<Vec<DenseArray>> {
    cfg.validate()?;
    params.check_shapes(cfg)?;
    check_queries(queries, cfg)?;
    if shapes.len() != cfg.num_levels() {
        return Err(ConfigError::LevelCountMismatch {
            config: cfg.num_levels(),
            pyramid: shapes.len(),
        }
        .into());
    }
    let offsets = params.offset_proj.forward(queries.embeddings())?;
    Ok(offsets_to_locations(&offsets, queries, cfg, shapes))
}

/// Everything the backward pass needs from a forward call.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnIntermediates {
    /// Projected values in flattened `(B, ΣH·W, D)` layout.
    pub value: DenseArray,
    /// Per level, `(B, Nq, heads, K_l, 2)`.
    pub sampling_locations: Vec<DenseArray>,
    /// `(B, Nq, heads, ΣK_l)`, softmax-normalized per head.
    pub attention_weights: DenseArray,
    /// Per level, `(B, Nq, heads, K_l, D/heads)`.
    pub samples: Vec<DenseArray>,
    /// Concatenated head outputs before the output projection, `(B, Nq, D)`.
    pub head_output: DenseArray,
    pub spatial_shapes: Vec<SpatialShape>,
    pub mode: SamplingMode,
}

fn level_layout(
    b: usize,
    start: usize,
    total: usize,
    shape: SpatialShape,
    d: usize,
    h: usize,
    dh: usize,
) -> MapLayout {
    MapLayout {
        base: (b * total + start) * d + h * dh,
        height: shape.height,
        width: shape.width,
        channels: dh,
        pixel_stride: d,
        channel_stride: 1,
    }
}

pub fn msda_forward(
    pyramid: &FeaturePyramid,
    queries: &QueryBatch,
    params: &DeformAttnParams,
    cfg: &DeformAttnConfig,
) -> Result<(DenseArray, AttnIntermediates)> {
    validate_config(cfg, pyramid)?;
    params.check_shapes(cfg)?;
    check_queries(queries, cfg)?;
    if queries.batch() != pyramid.batch() {
        return Err(Error::shape(format!(
            "query batch {} does not match pyramid batch {}",
            queries.batch(),
            pyramid.batch()
        )));
    }
    let (b, nq, heads, d) = (
        queries.batch(),
        queries.num_queries(),
        cfg.heads,
        cfg.embed_dim,
    );
    let (p, dh) = (cfg.total_points(), cfg.head_dim());
    let flat = flatten_pyramid(pyramid);
    let total = pyramid.total_pixels();
    let value = params.value_proj.forward(&flat.values)?;

    let emb = queries.embeddings();
    let offsets = params.offset_proj.forward(emb)?;
    let locations = offsets_to_locations(&offsets, queries, cfg, &flat.spatial_shapes);
    for loc in &locations {
        loc.ensure_finite("sampling location")?;
    }
    let logits = params.attn_proj.forward(emb)?;
    let mut weights = DenseArray::zeros(&[b, nq, heads, p]);
    for (w, l) in weights
        .data_mut()
        .chunks_exact_mut(p)
        .zip(logits.data().chunks_exact(p))
    {
        softmax_into(l, w);
    }

    let mut samples: Vec<DenseArray> = cfg
        .points_per_level
        .iter()
        .map(|&k| DenseArray::zeros(&[b, nq, heads, k, dh]))
        .collect();
    let mut head_output = DenseArray::zeros(&[b, nq, d]);
    let src = value.data();
    let aw = weights.data();
    let point_starts = cfg.level_point_offsets();
    for bi in 0..b {
        for q in 0..nq {
            for h in 0..heads {
                let bqh = (bi * nq + q) * heads + h;
                let out = &mut head_output.data_mut()[(bi * nq + q) * d + h * dh..][..dh];
                for (l, &k_l) in cfg.points_per_level.iter().enumerate() {
                    let layout = level_layout(
                        bi,
                        flat.level_start_index[l],
                        total,
                        flat.spatial_shapes[l],
                        d,
                        h,
                        dh,
                    );
                    let loc = locations[l].data();
                    let level_samples = samples[l].data_mut();
                    for k in 0..k_l {
                        let i = bqh * k_l + k;
                        let (x, y) = (loc[2 * i], loc[2 * i + 1]);
                        let s = &mut level_samples[i * dh..(i + 1) * dh];
                        match cfg.sampling_mode {
                            SamplingMode::Bilinear => bilinear_sample_into(src, &layout, x, y, s),
                            SamplingMode::Discrete => discrete_sample_into(src, &layout, x, y, s),
                        }
                        let a = aw[bqh * p + point_starts[l] + k];
                        for (o, v) in out.iter_mut().zip(s.iter()) {
                            *o += a * v;
                        }
                    }
                }
            }
        }
    }
    let output = params.output_proj.forward(&head_output)?;
    Ok((
        output,
        AttnIntermediates {
            value,
            sampling_locations: locations,
            attention_weights: weights,
            samples,
            head_output,
            spatial_shapes: flat.spatial_shapes,
            mode: cfg.sampling_mode,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnGrads {
    /// One `(B, C, H, W)` gradient per pyramid level.
    pub pyramid: Vec<DenseArray>,
    pub queries: DenseArray,
    pub reference_points: DenseArray,
    pub value_proj: LinearGrads,
    pub offset_proj: LinearGrads,
    pub attn_proj: LinearGrads,
    pub output_proj: LinearGrads,
}

pub fn msda_backward(
    pyramid: &FeaturePyramid,
    queries: &QueryBatch,
    params: &DeformAttnParams,
    cfg: &DeformAttnConfig,
    inter: &AttnIntermediates,
    d_output: &DenseArray,
) -> Result<AttnGrads> {
    validate_config(cfg, pyramid)?;
    params.check_shapes(cfg)?;
    check_queries(queries, cfg)?;
    let (b, nq, heads, d) = (
        queries.batch(),
        queries.num_queries(),
        cfg.heads,
        cfg.embed_dim,
    );
    let (p, dh) = (cfg.total_points(), cfg.head_dim());
    let shapes = pyramid.spatial_shapes();
    let total = pyramid.total_pixels();
    let stale = inter.spatial_shapes != shapes
        || inter.mode != cfg.sampling_mode
        || inter.attention_weights.shape() != [b, nq, heads, p]
        || inter.value.shape() != [b, total, d]
        || inter.samples.len() != cfg.num_levels()
        || inter
            .samples
            .iter()
            .zip(&cfg.points_per_level)
            .any(|(s, &k)| s.shape() != [b, nq, heads, k, dh]);
    if stale {
        return Err(Error::shape("intermediates do not match this forward call"));
    }
    d_output.expect_shape(&[b, nq, d], "output gradient")?;

    let (output_grads, d_head) = params.output_proj.backward(&inter.head_output, d_output)?;
    let mut d_value = DenseArray::zeros(&[b, total, d]);
    let mut d_logits = DenseArray::zeros(&[b, nq, heads, p]);
    let mut d_offsets = DenseArray::zeros(&[b, nq, 2 * heads * p]);
    let mut d_refs = DenseArray::zeros(&[b, nq, 2]);
    let starts = level_start_index(&shapes);
    let point_starts = cfg.level_point_offsets();
    let aw = inter.attention_weights.data();
    let src = inter.value.data();
    let mut scaled = vec![0.0; dh];
    let mut d_weight = vec![0.0; p];
    for bi in 0..b {
        for q in 0..nq {
            let bq = bi * nq + q;
            for h in 0..heads {
                let bqh = bq * heads + h;
                let up = &d_head.data()[bq * d + h * dh..][..dh];
                for (l, &k_l) in cfg.points_per_level.iter().enumerate() {
                    let layout = level_layout(bi, starts[l], total, shapes[l], d, h, dh);
                    let loc = inter.sampling_locations[l].data();
                    let smp = inter.samples[l].data();
                    for k in 0..k_l {
                        let i = bqh * k_l + k;
                        let slot = point_starts[l] + k;
                        let a = aw[bqh * p + slot];
                        let s = &smp[i * dh..(i + 1) * dh];
                        d_weight[slot] = s.iter().zip(up).map(|(s, g)| s * g).sum();
                        for (o, g) in scaled.iter_mut().zip(up) {
                            *o = a * g;
                        }
                        let (x, y) = (loc[2 * i], loc[2 * i + 1]);
                        match cfg.sampling_mode {
                            SamplingMode::Bilinear => {
                                let [gx, gy] = bilinear_backward_at(
                                    src,
                                    &layout,
                                    x,
                                    y,
                                    &scaled,
                                    d_value.data_mut(),
                                );
                                let o = 2 * (bqh * p + slot);
                                d_offsets.data_mut()[o] = gx / shapes[l].width as f64;
                                d_offsets.data_mut()[o + 1] = gy / shapes[l].height as f64;
                                d_refs.data_mut()[2 * bq] += gx;
                                d_refs.data_mut()[2 * bq + 1] += gy;
                            }
                            SamplingMode::Discrete => {
                                discrete_backward_at(&layout, x, y, &scaled, d_value.data_mut())
                            }
                        }
                    }
                }
                let w = &aw[bqh * p..(bqh + 1) * p];
                let mean: f64 = w.iter().zip(&d_weight).map(|(a, g)| a * g).sum();
                for (slot, dl) in d_logits.data_mut()[bqh * p..(bqh + 1) * p]
                    .iter_mut()
                    .enumerate()
                {
                    *dl = w[slot] * (d_weight[slot] - mean);
                }
            }
        }
    }

    let emb = queries.embeddings();
    let (attn_grads, dq_attn) = params.attn_proj.backward(emb, &d_logits)?;
    let (mut offset_grads, dq_offset) = params.offset_proj.backward(emb, &d_offsets)?;
    if params.offsets_frozen {
        offset_grads = LinearGrads::zeros_like(&params.offset_proj);
    }
    let d_queries = dq_attn.axpy(1.0, &dq_offset)?;
    let flat = flatten_pyramid(pyramid);
    let (value_grads, d_flat) = params.value_proj.backward(&flat.values, &d_value)?;
    let d_pyramid = unflatten_pyramid(&d_flat, &shapes)?
        .levels()
        .iter()
        .map(|l| l.values().clone())
        .collect();
    Ok(AttnGrads {
        pyramid: d_pyramid,
        queries: d_queries,
        reference_points: d_refs,
        value_proj: value_grads,
        offset_proj: offset_grads,
        attn_proj: attn_grads,
        output_proj: output_grads,
    })
}
