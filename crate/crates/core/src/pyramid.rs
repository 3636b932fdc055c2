//! Multi-level feature maps and the flattened `(B, ΣH·W, C)` layout the
//! attention kernels read from.
//!
//! Levels are stored highest resolution first. The flattened layout places
//! level `l` at rows `level_start_index[l] .. level_start_index[l] + H_l·W_l`,
//! pixels in row-major `(y, x)` order.

use crate::array::DenseArray;
use crate::error::{Error, Result};

/// One `(B, C, H, W)` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLevel {
    values: DenseArray,
}

impl FeatureLevel {
    pub fn new(values: DenseArray) -> Result<Self> {
        values.expect_rank(4, "feature level")?;
        let s = values.shape();
        if s[2] == 0 || s[3] == 0 {
            return Err(Error::shape(format!(
                "feature level has empty spatial extent {s:?}"
            )));
        }
        Ok(Self { values })
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[3]
    }

    pub fn values(&self) -> &DenseArray {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut DenseArray {
        &mut self.values
    }

    pub fn into_values(self) -> DenseArray {
        self.values
    }
}

/// Spatial extent `(height, width)` of one level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SpatialShape {
    pub height: usize,
    pub width: usize,
}

impl SpatialShape {
    pub const fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub const fn area(&self) -> usize {
        self.height * self.width
    }
}

impl std::fmt::Display for SpatialShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

impl std::str::FromStr for SpatialShape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (h, w) = s
            .trim()
            .split_once(['x', 'X'])
            .ok_or_else(|| Error::Parse(format!("expected HxW, got {s:?}")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|e| Error::Parse(format!("{s:?}: {e}")))
        };
        let shape = SpatialShape::new(parse(h)?, parse(w)?);
        if shape.area() == 0 {
            return Err(Error::Parse(format!("spatial shape {s:?} is empty")));
        }
        Ok(shape)
    }
}

/// Parses a comma separated list such as `8x8,4x4,2x2`.
pub fn parse_shape_list(s: &str) -> Result<Vec<SpatialShape>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect()
}

/// Prefix sums of `H_l·W_l`; entry `l` is the first flattened row of level `l`.
pub fn level_start_index(shapes: &[SpatialShape]) -> Vec<usize> {
    shapes
        .iter()
        .scan(0usize, |acc, s| {
            let start = *acc;
            *acc += s.area();
            Some(start)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<FeatureLevel>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<FeatureLevel>) -> Result<Self> {
        let first = levels
            .first()
            .ok_or_else(|| Error::shape("pyramid has no levels"))?;
        let (b, c) = (first.batch(), first.channels());
        for (l, level) in levels.iter().enumerate() {
            if level.batch() != b || level.channels() != c {
                return Err(Error::shape(format!(
                    "level {l} has (B, C) = ({}, {}), level 0 has ({b}, {c})",
                    level.batch(),
                    level.channels()
                )));
            }
        }
        Ok(Self { levels })
    }

    /// Wraps raw `(B, C, H, W)` arrays.
    pub fn from_arrays(arrays: Vec<DenseArray>) -> Result<Self> {
        Self::new(
            arrays
                .into_iter()
                .map(FeatureLevel::new)
                .collect::<Result<_>>()?,
        )
    }

    pub fn levels(&self) -> &[FeatureLevel] {
        &self.levels
    }

    pub fn levels_mut(&mut self) -> &mut [FeatureLevel] {
        &mut self.levels
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn batch(&self) -> usize {
        self.levels[0].batch()
    }

    pub fn channels(&self) -> usize {
        self.levels[0].channels()
    }

    pub fn spatial_shapes(&self) -> Vec<SpatialShape> {
        self.levels
            .iter()
            .map(|l| SpatialShape::new(l.height(), l.width()))
            .collect()
    }

    pub fn level_start_index(&self) -> Vec<usize> {
        level_start_index(&self.spatial_shapes())
    }

    pub fn total_pixels(&self) -> usize {
        self.levels.iter().map(|l| l.height() * l.width()).sum()
    }
}

/// A pyramid in `(B, ΣH·W, C)` layout together with its level bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatPyramid {
    pub values: DenseArray,
    pub spatial_shapes: Vec<SpatialShape>,
    pub level_start_index: Vec<usize>,
}

pub fn flatten_pyramid(p: &FeaturePyramid) -> FlatPyramid {
    let (b, c) = (p.batch(), p.channels());
    let shapes = p.spatial_shapes();
    let starts = level_start_index(&shapes);
    let total = p.total_pixels();
    let mut out = vec![0.0; b * total * c];
    for (level, &start) in p.levels.iter().zip(&starts) {
        let hw = level.height() * level.width();
        let src = level.values.data();
        for bi in 0..b {
            for ci in 0..c {
                let plane = &src[(bi * c + ci) * hw..][..hw];
                for (pix, &v) in plane.iter().enumerate() {
                    out[(bi * total + start + pix) * c + ci] = v;
                }
            }
        }
    }
    FlatPyramid {
        values: DenseArray::new(vec![b, total, c], out).expect("flattened extent"),
        spatial_shapes: shapes,
        level_start_index: starts,
    }
}

pub fn unflatten_pyramid(flat: &DenseArray, shapes: &[SpatialShape]) -> Result<FeaturePyramid> {
    flat.expect_rank(3, "flattened pyramid")?;
    let (b, total, c) = (flat.shape()[0], flat.shape()[1], flat.shape()[2]);
    let expected: usize = shapes.iter().map(SpatialShape::area).sum();
    if total != expected {
        return Err(Error::shape(format!(
            "flattened pyramid has {total} rows, spatial shapes cover {expected}"
        )));
    }
    let src = flat.data();
    let mut levels = Vec::with_capacity(shapes.len());
    for (shape, start) in shapes.iter().zip(level_start_index(shapes)) {
        let hw = shape.area();
        let mut data = vec![0.0; b * c * hw];
        for bi in 0..b {
            for pix in 0..hw {
                let row = &src[(bi * total + start + pix) * c..][..c];
                for (ci, &v) in row.iter().enumerate() {
                    data[(bi * c + ci) * hw + pix] = v;
                }
            }
        }
        levels.push(FeatureLevel::new(DenseArray::new(
            vec![b, c, shape.height, shape.width],
            data,
        )?)?);
    }
    FeaturePyramid::new(levels)
}

/// Query embeddings `(B, Nq, D)` with normalized reference points `(B, Nq, 2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBatch {
    embeddings: DenseArray,
    reference_points: DenseArray,
}

impl QueryBatch {
    pub fn new(embeddings: DenseArray, reference_points: DenseArray) -> Result<Self> {
        embeddings.expect_rank(3, "query embeddings")?;
        let (b, nq) = (embeddings.shape()[0], embeddings.shape()[1]);
        reference_points.expect_shape(&[b, nq, 2], "reference points")?;
        embeddings.ensure_finite("query embeddings")?;
        if let Some(v) = reference_points
            .data()
            .iter()
            .find(|v| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::InvalidArgument(format!(
                "reference coordinate {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            embeddings,
            reference_points,
        })
    }

    pub fn batch(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn num_queries(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[2]
    }

    pub fn embeddings(&self) -> &DenseArray {
        &self.embeddings
    }

    pub fn reference_points(&self) -> &DenseArray {
        &self.reference_points
    }

    /// Replaces the embeddings, keeping the reference points.
    pub fn with_embeddings(&self, embeddings: DenseArray) -> Result<Self> {
        embeddings.expect_shape(self.embeddings.shape(), "query embeddings")?;
        Ok(Self {
            embeddings,
            reference_points: self.reference_points.clone(),
        })
    }
}
