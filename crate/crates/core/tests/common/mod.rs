//! Reference implementations written as directly as possible, shared by the
//! integration tests.

#![allow(dead_code)]

use msdeform::attention::{init_params, msda_forward, DeformAttnConfig, DeformAttnParams};
use msdeform::{DenseArray, FeaturePyramid, QueryBatch, SamplingMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> DenseArray {
    DenseArray::from_fn(shape, |_| rng.random_range(lo..hi))
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na.max(nb) == 0.0 {
        diff
    } else {
        diff / na.max(nb)
    }
}

fn tent(u: f64, center: f64) -> f64 {
    (1.0 - (u - center).abs()).max(0.0)
}

/// Bilinear interpolation as a sum of tent functions centered on every pixel
/// center; pixels outside the map contribute nothing.
pub fn bilinear_oracle(
    map: impl Fn(usize, usize) -> f64,
    h: usize,
    w: usize,
    x: f64,
    y: f64,
) -> f64 {
    let (u, v) = (x * w as f64, y * h as f64);
    let mut s = 0.0;
    for j in 0..h {
        for i in 0..w {
            s += map(j, i) * tent(u, i as f64 + 0.5) * tent(v, j as f64 + 0.5);
        }
    }
    s
}

/// Value of the pixel whose square contains `(x·W, y·H)`, zero outside.
pub fn discrete_oracle(
    map: impl Fn(usize, usize) -> f64,
    h: usize,
    w: usize,
    x: f64,
    y: f64,
) -> f64 {
    let (u, v) = ((x * w as f64).floor(), (y * h as f64).floor());
    if u < 0.0 || v < 0.0 || u >= w as f64 || v >= h as f64 {
        return 0.0;
    }
    map(v as usize, u as usize)
}

pub fn sample_oracle(
    mode: SamplingMode,
    map: impl Fn(usize, usize) -> f64,
    h: usize,
    w: usize,
    x: f64,
    y: f64,
) -> f64 {
    match mode {
        SamplingMode::Bilinear => bilinear_oracle(map, h, w, x, y),
        SamplingMode::Discrete => discrete_oracle(map, h, w, x, y),
    }
}

fn dot_row(weight: &DenseArray, row: usize, x: &[f64]) -> f64 {
    let cols = weight.shape()[1];
    (0..cols)
        .map(|i| weight.data()[row * cols + i] * x[i])
        .sum()
}

/// Deformable attention by explicit loops over batch, query, head, level and
/// point. `levels` are `(B, D, H, W)`, `emb` is `(B, Nq, D)`, `refs` is
/// `(B, Nq, 2)`.
pub fn naive_msda(
    levels: &[DenseArray],
    emb: &DenseArray,
    refs: &DenseArray,
    params: &DeformAttnParams,
    cfg: &DeformAttnConfig,
) -> DenseArray {
    let (b, nq, d) = (emb.shape()[0], emb.shape()[1], emb.shape()[2]);
    let heads = cfg.heads;
    let dh = d / heads;
    let p_total: usize = cfg.points_per_level.iter().sum();

    // Projected values per level, indexed [b][c][y][x].
    let projected: Vec<DenseArray> = levels
        .iter()
        .map(|lv| {
            let (h, w) = (lv.shape()[2], lv.shape()[3]);
            let mut out = DenseArray::zeros(&[b, d, h, w]);
            for bi in 0..b {
                for y in 0..h {
                    for x in 0..w {
                        let pix: Vec<f64> = (0..d).map(|c| lv.at(&[bi, c, y, x])).collect();
                        for c in 0..d {
                            let v = params.value_proj.bias.data()[c]
                                + dot_row(&params.value_proj.weight, c, &pix);
                            out.set(&[bi, c, y, x], v);
                        }
                    }
                }
            }
            out
        })
        .collect();

    let mut out = DenseArray::zeros(&[b, nq, d]);
    for bi in 0..b {
        for q in 0..nq {
            let e: Vec<f64> = (0..d).map(|i| emb.at(&[bi, q, i])).collect();
            let (rx, ry) = (refs.at(&[bi, q, 0]), refs.at(&[bi, q, 1]));
            let mut head_out = vec![0.0; d];
            for h in 0..heads {
                let logits: Vec<f64> = (0..p_total)
                    .map(|p| {
                        params.attn_proj.bias.data()[h * p_total + p]
                            + dot_row(&params.attn_proj.weight, h * p_total + p, &e)
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                let mut p = 0;
                for (l, &k_l) in cfg.points_per_level.iter().enumerate() {
                    let (lh, lw) = (levels[l].shape()[2], levels[l].shape()[3]);
                    for _k in 0..k_l {
                        let a = (logits[p] - m).exp() / z;
                        let o = 2 * (h * p_total + p);
                        let ox = params.offset_proj.bias.data()[o]
                            + dot_row(&params.offset_proj.weight, o, &e);
                        let oy = params.offset_proj.bias.data()[o + 1]
                            + dot_row(&params.offset_proj.weight, o + 1, &e);
                        let x = rx + ox / lw as f64;
                        let y = ry + oy / lh as f64;
                        for c in 0..dh {
                            let ch = h * dh + c;
                            let map = |j: usize, i: usize| projected[l].at(&[bi, ch, j, i]);
                            head_out[ch] += a * sample_oracle(cfg.sampling_mode, map, lh, lw, x, y);
                        }
                        p += 1;
                    }
                }
            }
            for c in 0..d {
                let v = params.output_proj.bias.data()[c]
                    + dot_row(&params.output_proj.weight, c, &head_out);
                out.set(&[bi, q, c], v);
            }
        }
    }
    out
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &DenseArray, eps: f64, mut f: impl FnMut(&DenseArray) -> f64) -> DenseArray {
    let mut probe = x.clone();
    let mut g = DenseArray::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    g
}

pub fn dot(a: &DenseArray, b: &DenseArray) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// A random attention problem: 1–3 levels of up to 6×6, 1–4 heads, 0–3
/// points per level, small batch and query counts.
pub struct Instance {
    pub cfg: DeformAttnConfig,
    pub levels: Vec<DenseArray>,
    pub emb: DenseArray,
    pub refs: DenseArray,
    pub params: DeformAttnParams,
}

impl Instance {
    pub fn random(seed: u64, mode: SamplingMode) -> Self {
        let mut r = rng(seed);
        let heads = [1, 2, 4][r.random_range(0..3)];
        let d = heads * r.random_range(1..=3);
        let num_levels = r.random_range(1..=3);
        let points: Vec<usize> = (0..num_levels).map(|_| r.random_range(0..=3)).collect();
        let mut points = points;
        if points.iter().sum::<usize>() == 0 {
            points[0] = 1;
        }
        let b = r.random_range(1..=2);
        let nq = r.random_range(1..=4);
        let cfg = DeformAttnConfig {
            heads,
            points_per_level: points,
            num_query: nq,
            num_decoder: 1,
            embed_dim: d,
            sampling_mode: mode,
        };
        let levels = (0..num_levels)
            .map(|_| {
                let (h, w) = (r.random_range(1..=6), r.random_range(1..=6));
                random(&mut r, &[b, d, h, w], -1.0, 1.0)
            })
            .collect();
        let mut params = init_params(&cfg, r.random()).unwrap();
        for t in params.tensors_mut() {
            let j = random(&mut r, t.shape(), -0.5, 0.5);
            *t = t.axpy(1.0, &j).unwrap();
        }
        Self {
            emb: random(&mut r, &[b, nq, d], -1.0, 1.0),
            refs: random(&mut r, &[b, nq, 2], 0.0, 1.0),
            levels,
            params,
            cfg,
        }
    }

    pub fn pyramid(&self) -> FeaturePyramid {
        FeaturePyramid::from_arrays(self.levels.clone()).unwrap()
    }

    pub fn queries(&self) -> QueryBatch {
        QueryBatch::new(self.emb.clone(), self.refs.clone()).unwrap()
    }

    pub fn forward(&self) -> DenseArray {
        msda_forward(&self.pyramid(), &self.queries(), &self.params, &self.cfg)
            .unwrap()
            .0
    }
}
