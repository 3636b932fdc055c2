//! Synthetic blob-localization task.
//!
//! Queries sit on a uniform grid of reference points, one grid cell per
//! query. Each query owns one Gaussian blob placed at a random position inside
//! its cell, and must regress the blob center in normalized coordinates.
//!
//! Raw pyramid channels: blob intensity, then the pixel-center `x − 0.5` and
//! `y − 0.5` ramps. Every level samples the same continuous blob field at its
//! own pixel centers, so the blob spans fewer pixels on coarser levels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::pyramid::{FeaturePyramid, QueryBatch, SpatialShape};

pub const RAW_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTaskSpec {
    /// Level shapes, finest first.
    pub shapes: Vec<SpatialShape>,
    pub num_queries: usize,
    pub batch: usize,
    pub embed_dim: usize,
    /// Blob standard deviation in pixels of the finest level (at least 1).
    pub sigma_px: f64,
    /// Blob centers stay within this fraction of the half cell around the
    /// cell center.
    pub jitter: f64,
}

impl ToyTaskSpec {
    pub fn new(
        shapes: Vec<SpatialShape>,
        num_queries: usize,
        batch: usize,
        embed_dim: usize,
    ) -> Self {
        Self {
            shapes,
            num_queries,
            batch,
            embed_dim,
            sigma_px: 1.5,
            jitter: 0.7,
        }
    }

    /// Level shapes `ceil(size / 2^l)` for `levels` levels.
    pub fn pyramid_shapes(finest: usize, levels: usize) -> Vec<SpatialShape> {
        (0..levels)
            .map(|l| {
                let s = finest.div_ceil(1 << l).max(1);
                SpatialShape::new(s, s)
            })
            .collect()
    }

    fn grid(&self) -> (usize, usize) {
        let cols = (self.num_queries as f64).sqrt().ceil() as usize;
        let rows = self.num_queries.div_ceil(cols);
        (cols, rows)
    }

    /// Reference point of query `i`: the center of its grid cell.
    pub fn reference_point(&self, i: usize) -> (f64, f64) {
        let (cols, rows) = self.grid();
        (
            ((i % cols) as f64 + 0.5) / cols as f64,
            ((i / cols) as f64 + 0.5) / rows as f64,
        )
    }

    fn validate(&self) -> Result<()> {
        if self.shapes.is_empty() || self.num_queries == 0 || self.batch == 0 {
            return Err(Error::InvalidArgument(
                "toy task needs levels, queries and a batch".into(),
            ));
        }
        if self.sigma_px < 1.0 {
            return Err(Error::InvalidArgument(format!(
                "blob sigma {} below one pixel",
                self.sigma_px
            )));
        }
        if self.embed_dim < 2 {
            return Err(Error::InvalidArgument(
                "embed_dim must be at least 2".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyInstance {
    /// Raw `(B, RAW_CHANNELS, H_l, W_l)` levels.
    pub pyramid: FeaturePyramid,
    /// Blob centers `(B, Nq, 2)`.
    pub targets: DenseArray,
    pub queries: QueryBatch,
}

/// Fixed query embedding of a reference point: the centered coordinates
/// followed by sine/cosine pairs at doubling frequencies.
pub fn query_embedding(x: f64, y: f64, dim: usize) -> Vec<f64> {
    let mut e = Vec::with_capacity(dim);
    e.push(x - 0.5);
    e.push(y - 0.5);
    let mut freq = std::f64::consts::PI;
    while e.len() < dim {
        for v in [
            (freq * x).sin(),
            (freq * x).cos(),
            (freq * y).sin(),
            (freq * y).cos(),
        ] {
            if e.len() < dim {
                e.push(v);
            }
        }
        freq *= 2.0;
    }
    e
}

/// Builds an instance from explicit blob centers `(B, Nq, 2)`.
pub fn build_instance(spec: &ToyTaskSpec, targets: DenseArray) -> Result<ToyInstance> {
    spec.validate()?;
    let (b, nq) = (spec.batch, spec.num_queries);
    targets.expect_shape(&[b, nq, 2], "toy targets")?;
    if targets.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument(
            "toy targets must lie in [0, 1]".into(),
        ));
    }
    let finest = spec.shapes[0];
    let sx = spec.sigma_px / finest.width as f64;
    let sy = spec.sigma_px / finest.height as f64;
    let t = targets.data();
    let levels = spec
        .shapes
        .iter()
        .map(|shape| {
            let (h, w) = (shape.height, shape.width);
            let mut a = DenseArray::zeros(&[b, RAW_CHANNELS, h, w]);
            let data = a.data_mut();
            for bi in 0..b {
                for y in 0..h {
                    let yn = (y as f64 + 0.5) / h as f64;
                    for x in 0..w {
                        let xn = (x as f64 + 0.5) / w as f64;
                        let intensity: f64 = (0..nq)
                            .map(|q| {
                                let (tx, ty) = (t[2 * (bi * nq + q)], t[2 * (bi * nq + q) + 1]);
                                let dx = (xn - tx) / sx;
                                let dy = (yn - ty) / sy;
                                (-0.5 * (dx * dx + dy * dy)).exp()
                            })
                            .sum();
                        let base = bi * RAW_CHANNELS * h * w + y * w + x;
                        data[base] = intensity.min(1.0);
                        data[base + h * w] = xn - 0.5;
                        data[base + 2 * h * w] = yn - 0.5;
                    }
                }
            }
            a
        })
        .collect();
    let pyramid = FeaturePyramid::from_arrays(levels)?;
    let mut refs = Vec::with_capacity(b * nq * 2);
    let mut emb = Vec::with_capacity(b * nq * spec.embed_dim);
    for _ in 0..b {
        for q in 0..nq {
            let (rx, ry) = spec.reference_point(q);
            refs.extend([rx, ry]);
            emb.extend(query_embedding(rx, ry, spec.embed_dim));
        }
    }
    let queries = QueryBatch::new(
        DenseArray::new(vec![b, nq, spec.embed_dim], emb)?,
        DenseArray::new(vec![b, nq, 2], refs)?,
    )?;
    Ok(ToyInstance {
        pyramid,
        targets,
        queries,
    })
}

/// Deterministic instance: blob `i` lies uniformly within `jitter` half-cells
/// of query `i`'s reference point.
pub fn toy_task_generate(seed: u64, spec: &ToyTaskSpec) -> Result<ToyInstance> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cols, rows) = spec.grid();
    let (hx, hy) = (0.5 / cols as f64, 0.5 / rows as f64);
    let j = spec.jitter.clamp(0.0, 1.0);
    let mut targets = DenseArray::zeros(&[spec.batch, spec.num_queries, 2]);
    for (i, t) in targets.data_mut().chunks_exact_mut(2).enumerate() {
        let (rx, ry) = spec.reference_point(i % spec.num_queries);
        t[0] = rx + j * hx * rng.random_range(-1.0..=1.0);
        t[1] = ry + j * hy * rng.random_range(-1.0..=1.0);
    }
    build_instance(spec, targets)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pyramid_shapes_halve() {
        let s = ToyTaskSpec::pyramid_shapes(20, 3);
        assert_eq!(
            s,
            vec![
                SpatialShape::new(20, 20),
                SpatialShape::new(10, 10),
                SpatialShape::new(5, 5)
            ]
        );
        assert_eq!(
            ToyTaskSpec::pyramid_shapes(12, 3)[2],
            SpatialShape::new(3, 3)
        );
    }

    #[test]
    fn reference_grid() {
        let spec = ToyTaskSpec::new(vec![SpatialShape::new(8, 8)], 4, 1, 8);
        assert_eq!(spec.reference_point(0), (0.25, 0.25));
        assert_eq!(spec.reference_point(3), (0.75, 0.75));
        let one = ToyTaskSpec::new(vec![SpatialShape::new(8, 8)], 1, 1, 8);
        assert_eq!(one.reference_point(0), (0.5, 0.5));
    }

    #[test]
    fn embedding_has_requested_width() {
        for dim in [2, 5, 16] {
            assert_eq!(query_embedding(0.3, 0.7, dim).len(), dim);
        }
    }

    #[test]
    fn narrow_blobs_rejected() {
        let mut spec = ToyTaskSpec::new(vec![SpatialShape::new(8, 8)], 1, 1, 8);
        spec.sigma_px = 0.5;
        assert!(toy_task_generate(0, &spec).is_err());
    }
}
