//! A small decoder stack built on deformable cross-attention, used to run the
//! bilinear-pretrain / discrete-finetune workflow end to end on a synthetic
//! regression task.
//!
//! Layer: `h = LN(x + attn(x))`, `y = LN(h + W₂·silu(W₁·h))`. A shared 1×1
//! projection (the "backbone") lifts raw pyramid channels to `D` before the
//! first layer; a linear head maps the final query states to `(x, y)`.

pub mod toy;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::array::DenseArray;
use crate::attention::{
    init_params, msda_backward, msda_forward, set_sampling_mode, AttnIntermediates,
    DeformAttnConfig, DeformAttnParams,
};
use crate::error::{Error, Result};
use crate::layers::{silu, silu_backward, LayerNorm, Linear};
use crate::pyramid::{flatten_pyramid, unflatten_pyramid, FeaturePyramid, QueryBatch};
use crate::sampling::SamplingMode;
use crate::schedule::ParamGroup;

pub use toy::{toy_task_generate, ToyInstance, ToyTaskSpec};
pub use train::{run_two_phase_training, train_step, EpochRecord, TrainingReport};

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub attn_cfg: DeformAttnConfig,
    pub attn: DeformAttnParams,
    pub norm1: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub norm2: LayerNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniDecoder {
    pub backbone: Linear,
    pub layers: Vec<DecoderLayer>,
    pub head: Linear,
}

/// One trainable tensor as seen by the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub group: ParamGroup,
    /// Part of a sampling-offset predictor.
    pub is_offset: bool,
    pub frozen: bool,
}

impl MiniDecoder {
    /// `raw_channels` is the channel count of the input pyramid; every layer
    /// shares `cfg` (its `num_decoder` sets the depth).
    pub fn new(cfg: &DeformAttnConfig, raw_channels: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if cfg.num_decoder == 0 {
            return Err(Error::InvalidArgument(
                "decoder needs at least one layer".into(),
            ));
        }
        let d = cfg.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Linear::fan_in_uniform(raw_channels, d, &mut rng);
        let mut layers = Vec::with_capacity(cfg.num_decoder);
        for l in 0..cfg.num_decoder {
            let attn = init_params(cfg, seed.wrapping_add(1 + l as u64))?;
            layers.push(DecoderLayer {
                attn_cfg: cfg.clone(),
                attn,
                norm1: LayerNorm::new(d),
                ffn1: Linear::fan_in_uniform(d, 4 * d, &mut rng),
                ffn2: Linear::fan_in_uniform(4 * d, d, &mut rng),
                norm2: LayerNorm::new(d),
            });
        }
        let head = Linear::fan_in_uniform(d, 2, &mut rng);
        Ok(Self {
            backbone,
            layers,
            head,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.head.inputs()
    }

    pub fn sampling_mode(&self) -> SamplingMode {
        self.layers[0].attn_cfg.sampling_mode
    }

    pub fn set_sampling_mode(&mut self, mode: SamplingMode) {
        for layer in &mut self.layers {
            set_sampling_mode(&mut layer.attn, &mut layer.attn_cfg, mode);
        }
    }

    /// All tensors in optimizer order.
    pub fn tensors(&self) -> Vec<&DenseArray> {
        let mut out = vec![&self.backbone.weight, &self.backbone.bias];
        for layer in &self.layers {
            out.extend(layer.attn.tensors());
            out.extend([
                &layer.norm1.gamma,
                &layer.norm1.beta,
                &layer.ffn1.weight,
                &layer.ffn1.bias,
                &layer.ffn2.weight,
                &layer.ffn2.bias,
                &layer.norm2.gamma,
                &layer.norm2.beta,
            ]);
        }
        out.extend([&self.head.weight, &self.head.bias]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DenseArray> {
        let mut out = vec![&mut self.backbone.weight, &mut self.backbone.bias];
        for layer in &mut self.layers {
            out.extend(layer.attn.tensors_mut());
            out.extend([
                &mut layer.norm1.gamma,
                &mut layer.norm1.beta,
                &mut layer.ffn1.weight,
                &mut layer.ffn1.bias,
                &mut layer.ffn2.weight,
                &mut layer.ffn2.bias,
                &mut layer.norm2.gamma,
                &mut layer.norm2.beta,
            ]);
        }
        out.extend([&mut self.head.weight, &mut self.head.bias]);
        out
    }

    /// Names, groups and freeze flags, parallel to [`MiniDecoder::tensors`].
    pub fn param_info(&self) -> Vec<ParamInfo> {
        let plain = |name: String, group| ParamInfo {
            name,
            group,
            is_offset: false,
            frozen: false,
        };
        let mut out = vec![
            plain("backbone.weight".into(), ParamGroup::Backbone),
            plain("backbone.bias".into(), ParamGroup::Backbone),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, _) in layer.attn.named_tensors() {
                let is_offset = name.starts_with("offset_proj");
                out.push(ParamInfo {
                    name: format!("layers.{l}.attn.{name}"),
                    group: ParamGroup::Detector,
                    is_offset,
                    frozen: is_offset && layer.attn.offsets_frozen,
                });
            }
            for name in [
                "norm1.gamma",
                "norm1.beta",
                "ffn1.weight",
                "ffn1.bias",
                "ffn2.weight",
                "ffn2.bias",
                "norm2.gamma",
                "norm2.beta",
            ] {
                out.push(plain(format!("layers.{l}.{name}"), ParamGroup::Detector));
            }
        }
        out.push(plain("head.weight".into(), ParamGroup::Detector));
        out.push(plain("head.bias".into(), ParamGroup::Detector));
        out
    }

    /// SHA-256 prefix over every offset-predictor tensor.
    pub fn offset_checksum(&self) -> String {
        let mut h = Sha256::new();
        for layer in &self.layers {
            for t in [&layer.attn.offset_proj.weight, &layer.attn.offset_proj.bias] {
                for v in t.data() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex_prefix(&h.finalize())
    }

    /// SHA-256 prefix over every tensor.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in self.tensors() {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex_prefix(&h.finalize())
    }
}

fn hex_prefix(bytes: &[u8]) -> String {
    bytes.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct DecoderCache {
    raw_flat: DenseArray,
    features: FeaturePyramid,
    layers: Vec<LayerCache>,
    final_state: DenseArray,
}

#[derive(Debug, Clone)]
struct LayerCache {
    queries: QueryBatch,
    attn: AttnIntermediates,
    residual1: DenseArray,
    hidden: DenseArray,
    ffn_pre: DenseArray,
    ffn_act: DenseArray,
    residual2: DenseArray,
}

/// Runs the decoder; returns predictions `(B, Nq, 2)` and the activation cache.
pub fn decoder_forward_cached(
    model: &MiniDecoder,
    pyramid: &FeaturePyramid,
    queries: &QueryBatch,
) -> Result<(DenseArray, DecoderCache)> {
    let flat = flatten_pyramid(pyramid);
    let lifted = model.backbone.forward(&flat.values)?;
    let features = unflatten_pyramid(&lifted, &flat.spatial_shapes)?;
    let mut x = queries.embeddings().clone();
    let mut caches = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let q = queries.with_embeddings(x.clone())?;
        let (a, attn) = msda_forward(&features, &q, &layer.attn, &layer.attn_cfg)?;
        let residual1 = x.axpy(1.0, &a)?;
        let hidden = layer.norm1.forward(&residual1)?;
        let ffn_pre = layer.ffn1.forward(&hidden)?;
        let ffn_act = silu(&ffn_pre);
        let ffn_out = layer.ffn2.forward(&ffn_act)?;
        let residual2 = hidden.axpy(1.0, &ffn_out)?;
        x = layer.norm2.forward(&residual2)?;
        caches.push(LayerCache {
            queries: q,
            attn,
            residual1,
            hidden,
            ffn_pre,
            ffn_act,
            residual2,
        });
    }
    let pred = model.head.forward(&x)?;
    Ok((
        pred,
        DecoderCache {
            raw_flat: flat.values,
            features,
            layers: caches,
            final_state: x,
        },
    ))
}

pub fn decoder_forward(model: &MiniDecoder, instance: &ToyInstance) -> Result<DenseArray> {
    Ok(decoder_forward_cached(model, &instance.pyramid, &instance.queries)?.0)
}

/// Gradients for every tensor (in [`MiniDecoder::tensors`] order) given the
/// upstream gradient of the predictions.
pub fn decoder_backward(
    model: &MiniDecoder,
    cache: &DecoderCache,
    d_pred: &DenseArray,
) -> Result<Vec<DenseArray>> {
    if cache.layers.len() != model.layers.len() {
        return Err(Error::shape("decoder cache does not match model depth"));
    }
    let (head_g, mut dx) = model.head.backward(&cache.final_state, d_pred)?;
    let mut d_features: Vec<DenseArray> = cache
        .features
        .levels()
        .iter()
        .map(|l| DenseArray::zeros(l.values().shape()))
        .collect();
    let mut layer_grads = Vec::with_capacity(model.layers.len());
    for (layer, lc) in model.layers.iter().zip(&cache.layers).rev() {
        let (n2, d_res2) = layer.norm2.backward(&lc.residual2, &dx)?;
        let (f2, d_act) = layer.ffn2.backward(&lc.ffn_act, &d_res2)?;
        let d_pre = silu_backward(&lc.ffn_pre, &d_act)?;
        let (f1, d_hidden_ffn) = layer.ffn1.backward(&lc.hidden, &d_pre)?;
        let d_hidden = d_res2.axpy(1.0, &d_hidden_ffn)?;
        let (n1, d_res1) = layer.norm1.backward(&lc.residual1, &d_hidden)?;
        let ag = msda_backward(
            &cache.features,
            &lc.queries,
            &layer.attn,
            &layer.attn_cfg,
            &lc.attn,
            &d_res1,
        )?;
        for (acc, g) in d_features.iter_mut().zip(&ag.pyramid) {
            *acc = acc.axpy(1.0, g)?;
        }
        dx = d_res1.axpy(1.0, &ag.queries)?;
        layer_grads.push(vec![
            ag.value_proj.weight,
            ag.value_proj.bias,
            ag.offset_proj.weight,
            ag.offset_proj.bias,
            ag.attn_proj.weight,
            ag.attn_proj.bias,
            ag.output_proj.weight,
            ag.output_proj.bias,
            n1.gamma,
            n1.beta,
            f1.weight,
            f1.bias,
            f2.weight,
            f2.bias,
            n2.gamma,
            n2.beta,
        ]);
    }
    let d_feat_pyramid = FeaturePyramid::from_arrays(d_features)?;
    let d_lifted = flatten_pyramid(&d_feat_pyramid).values;
    let (bb, _) = model.backbone.backward(&cache.raw_flat, &d_lifted)?;
    let mut out = vec![bb.weight, bb.bias];
    for g in layer_grads.into_iter().rev() {
        out.extend(g);
    }
    out.extend([head_g.weight, head_g.bias]);
    Ok(out)
}

/// Mean squared error over all coordinates and its gradient.
pub fn mse_loss(pred: &DenseArray, target: &DenseArray) -> Result<(f64, DenseArray)> {
    target.expect_shape(pred.shape(), "regression target")?;
    let n = pred.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            loss += (p - t) * (p - t);
            2.0 * (p - t) / n
        })
        .collect();
    Ok((loss / n, DenseArray::new(pred.shape().to_vec(), grad)?))
}
