//! Bilinear and discrete (nearest pixel center) sampling of value maps at
//! normalized locations.
//!
//! Coordinate convention: normalized `x ∈ [0, 1]` maps to the continuous
//! pixel coordinate `u = x·W`. Pixel `i` covers `[i, i + 1)` and has its
//! center at `i + 0.5`. Bilinear sampling interpolates between the four
//! surrounding centers; centers outside the map read as zero. Discrete
//! sampling reads pixel `(⌊u⌋, ⌊v⌋)`, i.e. the nearest center with ties going
//! to the larger index, and returns zero outside the map.

use serde::{Deserialize, Serialize};

use crate::array::DenseArray;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    Bilinear,
    Discrete,
}

impl SamplingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplingMode::Bilinear => "bilinear",
            SamplingMode::Discrete => "discrete",
        }
    }
}

impl std::fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "bilinear" | "grid_sample" => Ok(SamplingMode::Bilinear),
            "discrete" | "discrete_sample" => Ok(SamplingMode::Discrete),
            other => Err(Error::Parse(format!("unknown sampling mode {other:?}"))),
        }
    }
}

/// Where one `(C, H, W)` map lives inside a flat buffer.
///
/// Element `(c, y, x)` is at `base + (y·width + x)·pixel_stride + c·channel_stride`,
/// which covers both planar `(C, H, W)` storage and the interleaved
/// `(H·W, C)` rows of a flattened pyramid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapLayout {
    pub base: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixel_stride: usize,
    pub channel_stride: usize,
}

impl MapLayout {
    pub fn planar(base: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            base,
            height,
            width,
            channels,
            pixel_stride: 1,
            channel_stride: height * width,
        }
    }

    #[inline]
    fn pixel(&self, x: isize, y: isize) -> Option<usize> {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            return None;
        }
        Some(self.base + (y as usize * self.width + x as usize) * self.pixel_stride)
    }
}

/// The four interpolation taps around a location, as pixel offsets and weights.
#[derive(Debug, Clone, Copy)]
struct Taps {
    offsets: [Option<usize>; 4],
    weights: [f64; 4],
    fx: f64,
    fy: f64,
}

#[inline]
fn bilinear_taps(layout: &MapLayout, x: f64, y: f64) -> Taps {
    let u = x * layout.width as f64 - 0.5;
    let v = y * layout.height as f64 - 0.5;
    let (u0, v0) = (u.floor(), v.floor());
    let (fx, fy) = (u - u0, v - v0);
    let (x0, y0) = (u0 as isize, v0 as isize);
    Taps {
        offsets: [
            layout.pixel(x0, y0),
            layout.pixel(x0 + 1, y0),
            layout.pixel(x0, y0 + 1),
            layout.pixel(x0 + 1, y0 + 1),
        ],
        weights: [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ],
        fx,
        fy,
    }
}

/// Offset of the pixel a discrete sample reads, `None` outside the map.
#[inline]
pub fn discrete_pixel(layout: &MapLayout, x: f64, y: f64) -> Option<usize> {
    let u = (x * layout.width as f64).floor();
    let v = (y * layout.height as f64).floor();
    layout.pixel(u as isize, v as isize)
}

/// `out[c] += scale · bilinear(c)` for every channel.
#[inline]
pub fn bilinear_accumulate(
    data: &[f64],
    layout: &MapLayout,
    x: f64,
    y: f64,
    scale: f64,
    out: &mut [f64],
) {
    let taps = bilinear_taps(layout, x, y);
    for (off, w) in taps.offsets.iter().zip(taps.weights) {
        let Some(off) = *off else { continue };
        if w == 0.0 {
            continue;
        }
        let sw = scale * w;
        for (c, o) in out.iter_mut().enumerate().take(layout.channels) {
            *o += sw * data[off + c * layout.channel_stride];
        }
    }
}

/// `out[c] += scale · discrete(c)` for every channel.
#[inline]
pub fn discrete_accumulate(
    data: &[f64],
    layout: &MapLayout,
    x: f64,
    y: f64,
    scale: f64,
    out: &mut [f64],
) {
    if let Some(off) = discrete_pixel(layout, x, y) {
        for (c, o) in out.iter_mut().enumerate().take(layout.channels) {
            *o += scale * data[off + c * layout.channel_stride];
        }
    }
}

/// Writes the bilinear sample into `out` (overwriting it).
#[inline]
pub fn bilinear_sample_into(data: &[f64], layout: &MapLayout, x: f64, y: f64, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    bilinear_accumulate(data, layout, x, y, 1.0, out);
}

/// Writes the discrete sample into `out` (overwriting it).
#[inline]
pub fn discrete_sample_into(data: &[f64], layout: &MapLayout, x: f64, y: f64, out: &mut [f64]) {
    match discrete_pixel(layout, x, y) {
        Some(off) => {
            for (c, o) in out.iter_mut().enumerate().take(layout.channels) {
                *o = data[off + c * layout.channel_stride];
            }
        }
        None => out.iter_mut().for_each(|o| *o = 0.0),
    }
}

/// Adjoint of one bilinear sample. Scatters `upstream` into `d_data` (same
/// layout as `data`) and returns the gradient with respect to the normalized
/// location `(x, y)`.
///
/// On an interpolation-cell boundary the derivative from inside the cell
/// selected by `floor` is returned.
#[inline]
pub fn bilinear_backward_at(
    data: &[f64],
    layout: &MapLayout,
    x: f64,
    y: f64,
    upstream: &[f64],
    d_data: &mut [f64],
) -> [f64; 2] {
    let taps = bilinear_taps(layout, x, y);
    let mut corner_dot = [0.0; 4];
    for ((off, w), dot) in taps
        .offsets
        .iter()
        .zip(taps.weights)
        .zip(corner_dot.iter_mut())
    {
        let Some(off) = *off else { continue };
        for (c, g) in upstream.iter().enumerate().take(layout.channels) {
            let idx = off + c * layout.channel_stride;
            d_data[idx] += w * g;
            *dot += g * data[idx];
        }
    }
    let [v00, v10, v01, v11] = corner_dot;
    let (fx, fy) = (taps.fx, taps.fy);
    let d_u = (1.0 - fy) * (v10 - v00) + fy * (v11 - v01);
    let d_v = (1.0 - fx) * (v01 - v00) + fx * (v11 - v10);
    [d_u * layout.width as f64, d_v * layout.height as f64]
}

/// Adjoint of one discrete sample: scatters `upstream` into the selected
/// pixel. The location gradient is zero.
#[inline]
pub fn discrete_backward_at(
    layout: &MapLayout,
    x: f64,
    y: f64,
    upstream: &[f64],
    d_data: &mut [f64],
) {
    if let Some(off) = discrete_pixel(layout, x, y) {
        for (c, g) in upstream.iter().enumerate().take(layout.channels) {
            d_data[off + c * layout.channel_stride] += g;
        }
    }
}

/// Gradients of a sampling call.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrads {
    /// Same shape as the sampled value map.
    pub d_values: DenseArray,
    /// Same shape as the locations; all zero for discrete sampling.
    pub d_coords: DenseArray,
}

struct Dims {
    batch: usize,
    heads: usize,
    channels: usize,
    height: usize,
    width: usize,
    queries: usize,
    points: usize,
}

fn check(values: &DenseArray, loc: &DenseArray) -> Result<Dims> {
    values.expect_rank(5, "value map (B, heads, C_h, H, W)")?;
    loc.expect_rank(5, "sampling locations (B, Nq, heads, P, 2)")?;
    let v = values.shape();
    let l = loc.shape();
    if l[0] != v[0] || l[2] != v[1] || l[4] != 2 {
        return Err(Error::shape(format!(
            "locations {l:?} incompatible with value map {v:?}"
        )));
    }
    if v[3] == 0 || v[4] == 0 {
        return Err(Error::shape(format!(
            "value map has empty spatial extent {v:?}"
        )));
    }
    loc.ensure_finite("sampling location")?;
    Ok(Dims {
        batch: v[0],
        heads: v[1],
        channels: v[2],
        height: v[3],
        width: v[4],
        queries: l[1],
        points: l[3],
    })
}

fn sample_forward(values: &DenseArray, loc: &DenseArray, mode: SamplingMode) -> Result<DenseArray> {
    let d = check(values, loc)?;
    let mut out = DenseArray::zeros(&[d.batch, d.queries, d.heads, d.points, d.channels]);
    let (src, coords) = (values.data(), loc.data());
    let map_len = d.channels * d.height * d.width;
    for (i, chunk) in out
        .data_mut()
        .chunks_exact_mut(d.channels.max(1))
        .enumerate()
    {
        if d.channels == 0 {
            break;
        }
        let h = (i / d.points) % d.heads;
        let b = i / (d.points * d.heads * d.queries);
        let layout = MapLayout::planar((b * d.heads + h) * map_len, d.channels, d.height, d.width);
        let (x, y) = (coords[2 * i], coords[2 * i + 1]);
        match mode {
            SamplingMode::Bilinear => bilinear_sample_into(src, &layout, x, y, chunk),
            SamplingMode::Discrete => discrete_sample_into(src, &layout, x, y, chunk),
        }
    }
    Ok(out)
}

fn sample_backward(
    values: &DenseArray,
    loc: &DenseArray,
    upstream: &DenseArray,
    mode: SamplingMode,
) -> Result<SampleGrads> {
    let d = check(values, loc)?;
    upstream.expect_shape(
        &[d.batch, d.queries, d.heads, d.points, d.channels],
        "upstream gradient",
    )?;
    let mut d_values = DenseArray::zeros(values.shape());
    let mut d_coords = DenseArray::zeros(loc.shape());
    let map_len = d.channels * d.height * d.width;
    let (src, coords, up) = (values.data(), loc.data(), upstream.data());
    let n = d.batch * d.queries * d.heads * d.points;
    // Sequential scatter keeps the accumulation order fixed.
    for i in 0..n {
        let h = (i / d.points) % d.heads;
        let b = i / (d.points * d.heads * d.queries);
        let layout = MapLayout::planar((b * d.heads + h) * map_len, d.channels, d.height, d.width);
        let (x, y) = (coords[2 * i], coords[2 * i + 1]);
        let g = &up[i * d.channels..(i + 1) * d.channels];
        match mode {
            SamplingMode::Bilinear => {
                let [gx, gy] = bilinear_backward_at(src, &layout, x, y, g, d_values.data_mut());
                d_coords.data_mut()[2 * i] = gx;
                d_coords.data_mut()[2 * i + 1] = gy;
            }
            SamplingMode::Discrete => discrete_backward_at(&layout, x, y, g, d_values.data_mut()),
        }
    }
    Ok(SampleGrads { d_values, d_coords })
}

/// Samples `values (B, heads, C_h, H, W)` at `loc (B, Nq, heads, P, 2)`,
/// returning `(B, Nq, heads, P, C_h)`.
pub fn bilinear_sample_forward(values: &DenseArray, loc: &DenseArray) -> Result<DenseArray> {
    sample_forward(values, loc, SamplingMode::Bilinear)
}

pub fn bilinear_sample_backward(
    values: &DenseArray,
    loc: &DenseArray,
    upstream: &DenseArray,
) -> Result<SampleGrads> {
    sample_backward(values, loc, upstream, SamplingMode::Bilinear)
}

pub fn discrete_sample_forward(values: &DenseArray, loc: &DenseArray) -> Result<DenseArray> {
    sample_forward(values, loc, SamplingMode::Discrete)
}

pub fn discrete_sample_backward(
    values: &DenseArray,
    loc: &DenseArray,
    upstream: &DenseArray,
) -> Result<SampleGrads> {
    sample_backward(values, loc, upstream, SamplingMode::Discrete)
}

pub fn sample_with(
    mode: SamplingMode,
    values: &DenseArray,
    loc: &DenseArray,
) -> Result<DenseArray> {
    sample_forward(values, loc, mode)
}

pub fn sample_backward_with(
    mode: SamplingMode,
    values: &DenseArray,
    loc: &DenseArray,
    upstream: &DenseArray,
) -> Result<SampleGrads> {
    sample_backward(values, loc, upstream, mode)
}

/// Distance from continuous coordinate `u` to the nearest multiple of 0.5,
/// i.e. to the closest bilinear kink or discrete rounding boundary.
pub fn boundary_distance(u: f64) -> f64 {
    let r = (2.0 * u).fract().abs() / 2.0;
    r.min(0.5 - r)
}
