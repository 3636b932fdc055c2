//! The four strong augmentation operators: photometric distortion, zoom-out,
//! IoU-constrained cropping and multi-scale resizing.
//!
//! Images are `(H, W, 3)` arrays with values in `[0, 1]`; boxes are absolute
//! pixel corners. Every operator is a pure function of its input and the RNG
//! state.

use rand::Rng;

use crate::array::DenseArray;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = w * h;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    fn translate(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    image: DenseArray,
    pub boxes: Vec<BBox>,
    pub labels: Vec<u32>,
}

impl ImageSample {
    pub fn new(image: DenseArray, boxes: Vec<BBox>, labels: Vec<u32>) -> Result<Self> {
        let s = Self {
            image,
            boxes,
            labels,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.image.shape();
        if shape.len() != 3 || shape[2] != 3 || shape[0] == 0 || shape[1] == 0 {
            return Err(Error::shape(format!(
                "image must be (H, W, 3), got {shape:?}"
            )));
        }
        if let Some(v) = self.image.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        if self.boxes.len() != self.labels.len() {
            return Err(Error::InvalidArgument(
                "boxes and labels differ in length".into(),
            ));
        }
        let (w, h) = (self.width() as f64, self.height() as f64);
        for b in &self.boxes {
            let ok =
                0.0 <= b.x1 && b.x1 < b.x2 && b.x2 <= w && 0.0 <= b.y1 && b.y1 < b.y2 && b.y2 <= h;
            if !ok {
                return Err(Error::InvalidArgument(format!(
                    "box {b:?} invalid for {w}x{h} image"
                )));
            }
        }
        Ok(())
    }

    pub fn image(&self) -> &DenseArray {
        &self.image
    }

    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    fn with_image(&self, image: DenseArray) -> Self {
        Self {
            image,
            boxes: self.boxes.clone(),
            labels: self.labels.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhotometricParams {
    /// Chance that each of the four adjustments is applied.
    pub probability: f64,
    /// Brightness delta bound.
    pub brightness: f64,
    pub contrast: (f64, f64),
    pub saturation: (f64, f64),
    /// Hue rotation bound in degrees.
    pub hue_degrees: f64,
}

impl Default for PhotometricParams {
    fn default() -> Self {
        Self {
            probability: 0.5,
            brightness: 32.0 / 255.0,
            contrast: (0.5, 1.5),
            saturation: (0.5, 1.5),
            hue_degrees: 18.0,
        }
    }
}

fn map_pixels(img: &DenseArray, mut f: impl FnMut([f64; 3]) -> [f64; 3]) -> DenseArray {
    let mut out = img.clone();
    for px in out.data_mut().chunks_exact_mut(3) {
        let [r, g, b] = f([px[0], px[1], px[2]]);
        px[0] = r.clamp(0.0, 1.0);
        px[1] = g.clamp(0.0, 1.0);
        px[2] = b.clamp(0.0, 1.0);
    }
    out
}

pub fn adjust_brightness(img: &DenseArray, delta: f64) -> DenseArray {
    map_pixels(img, |p| p.map(|v| v + delta))
}

/// Blends every pixel with the mean luma of the image.
pub fn adjust_contrast(img: &DenseArray, factor: f64) -> DenseArray {
    let n = (img.len() / 3).max(1) as f64;
    let mean = img
        .data()
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .sum::<f64>()
        / n;
    map_pixels(img, |p| p.map(|v| mean + factor * (v - mean)))
}

/// Scales HSV saturation; zero-chroma pixels are fixed points.
pub fn adjust_saturation(img: &DenseArray, factor: f64) -> DenseArray {
    map_pixels(img, |p| {
        let [h, s, v] = rgb_to_hsv(p);
        hsv_to_rgb([h, (s * factor).clamp(0.0, 1.0), v])
    })
}

/// Rotates HSV hue by `degrees`, wrapping around the color wheel.
pub fn adjust_hue(img: &DenseArray, degrees: f64) -> DenseArray {
    map_pixels(img, |p| {
        let [h, s, v] = rgb_to_hsv(p);
        hsv_to_rgb([(h + degrees / 360.0).rem_euclid(1.0), s, v])
    })
}

/// Hue in `[0, 1)`, saturation and value in `[0, 1]`.
pub fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let chroma = max - min;
    if chroma == 0.0 {
        return [0.0, 0.0, max];
    }
    let sector = if max == r {
        ((g - b) / chroma).rem_euclid(6.0)
    } else if max == g {
        (b - r) / chroma + 2.0
    } else {
        (r - g) / chroma + 4.0
    };
    [sector / 6.0, chroma / max, max]
}

pub fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    if s == 0.0 {
        return [v, v, v];
    }
    let sector = (h * 6.0).rem_euclid(6.0);
    let i = sector.floor();
    let f = sector - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u8 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Brightness, contrast, saturation and hue adjustments, each applied
/// independently with `params.probability`, in that order.
pub fn photometric_distort(
    s: &ImageSample,
    rng: &mut impl Rng,
    params: &PhotometricParams,
) -> ImageSample {
    let mut img = s.image.clone();
    if rng.random_bool(params.probability) {
        img = adjust_brightness(
            &img,
            rng.random_range(-params.brightness..=params.brightness),
        );
    }
    if rng.random_bool(params.probability) {
        img = adjust_contrast(
            &img,
            rng.random_range(params.contrast.0..=params.contrast.1),
        );
    }
    if rng.random_bool(params.probability) {
        img = adjust_saturation(
            &img,
            rng.random_range(params.saturation.0..=params.saturation.1),
        );
    }
    if rng.random_bool(params.probability) {
        img = adjust_hue(
            &img,
            rng.random_range(-params.hue_degrees..=params.hue_degrees),
        );
    }
    s.with_image(img)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZoomOutParams {
    pub probability: f64,
    pub max_ratio: f64,
}

impl Default for ZoomOutParams {
    fn default() -> Self {
        Self {
            probability: 0.5,
            max_ratio: 4.0,
        }
    }
}

/// Places the image on a `canvas_w × canvas_h` canvas at `(left, top)`,
/// filling the rest with the per-channel mean.
pub fn zoom_out_with(
    s: &ImageSample,
    canvas_w: usize,
    canvas_h: usize,
    left: usize,
    top: usize,
) -> Result<ImageSample> {
    let (w, h) = (s.width(), s.height());
    if left + w > canvas_w || top + h > canvas_h {
        return Err(Error::InvalidArgument(format!(
            "{w}x{h} image at ({left}, {top}) does not fit a {canvas_w}x{canvas_h} canvas"
        )));
    }
    let mut mean = [0.0; 3];
    for px in s.image.data().chunks_exact(3) {
        for c in 0..3 {
            mean[c] += px[c];
        }
    }
    let n = (w * h) as f64;
    let mean = mean.map(|m| (m / n).clamp(0.0, 1.0));
    let mut canvas = DenseArray::from_fn(&[canvas_h, canvas_w, 3], |i| mean[i % 3]);
    let src = s.image.data();
    for y in 0..h {
        let dst = &mut canvas.data_mut()[((top + y) * canvas_w + left) * 3..][..w * 3];
        dst.copy_from_slice(&src[y * w * 3..(y + 1) * w * 3]);
    }
    Ok(ImageSample {
        image: canvas,
        boxes: s
            .boxes
            .iter()
            .map(|b| b.translate(left as f64, top as f64))
            .collect(),
        labels: s.labels.clone(),
    })
}

pub fn random_zoom_out(s: &ImageSample, rng: &mut impl Rng, params: &ZoomOutParams) -> ImageSample {
    if params.max_ratio < 1.0 || !rng.random_bool(params.probability) {
        return s.clone();
    }
    let ratio = rng.random_range(1.0..=params.max_ratio);
    let (w, h) = (s.width(), s.height());
    let canvas_w = ((w as f64 * ratio) as usize).max(w);
    let canvas_h = ((h as f64 * ratio) as usize).max(h);
    let left = rng.random_range(0..=canvas_w - w);
    let top = rng.random_range(0..=canvas_h - h);
    zoom_out_with(s, canvas_w, canvas_h, left, top).expect("canvas covers image")
}

#[derive(Debug, Clone, PartialEq)]
pub struct IouCropParams {
    pub thresholds: Vec<f64>,
    pub trials: usize,
    pub scale: (f64, f64),
    pub aspect: (f64, f64),
}

impl Default for IouCropParams {
    fn default() -> Self {
        Self {
            thresholds: vec![0.0, 0.1, 0.3, 0.5, 0.7, 0.9],
            trials: 50,
            scale: (0.3, 1.0),
            aspect: (0.5, 2.0),
        }
    }
}

/// Integer pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRect {
    pub left: usize,
    pub top: usize,
    pub width: usize,
    pub height: usize,
}

impl CropRect {
    fn as_box(&self) -> BBox {
        BBox::new(
            self.left as f64,
            self.top as f64,
            (self.left + self.width) as f64,
            (self.top + self.height) as f64,
        )
    }

    fn contains_center(&self, b: &BBox) -> bool {
        let (cx, cy) = b.center();
        let r = self.as_box();
        cx > r.x1 && cx < r.x2 && cy > r.y1 && cy < r.y2
    }
}

/// Draws one candidate with area fraction in `params.scale` and aspect ratio
/// (width over height, relative to the image) in `params.aspect`.
pub fn sample_crop_candidate(
    rng: &mut impl Rng,
    width: usize,
    height: usize,
    params: &IouCropParams,
) -> CropRect {
    let scale = rng.random_range(params.scale.0..=params.scale.1);
    let aspect = rng.random_range(params.aspect.0..=params.aspect.1);
    let cw = ((width as f64 * (scale * aspect).sqrt()).round() as usize).clamp(1, width);
    let ch = ((height as f64 * (scale / aspect).sqrt()).round() as usize).clamp(1, height);
    let left = rng.random_range(0..=width - cw);
    let top = rng.random_range(0..=height - ch);
    CropRect {
        left,
        top,
        width: cw,
        height: ch,
    }
}

/// Crops to `rect`, keeping boxes whose centers fall strictly inside and
/// clipping them to the crop.
pub fn crop_to(s: &ImageSample, rect: CropRect) -> Result<ImageSample> {
    if rect.width == 0
        || rect.height == 0
        || rect.left + rect.width > s.width()
        || rect.top + rect.height > s.height()
    {
        return Err(Error::InvalidArgument(format!(
            "crop {rect:?} outside {}x{} image",
            s.width(),
            s.height()
        )));
    }
    let (w, cw) = (s.width(), rect.width);
    let mut data = Vec::with_capacity(rect.width * rect.height * 3);
    for y in rect.top..rect.top + rect.height {
        data.extend_from_slice(&s.image.data()[(y * w + rect.left) * 3..][..cw * 3]);
    }
    let r = rect.as_box();
    let (boxes, labels) = s
        .boxes
        .iter()
        .zip(&s.labels)
        .filter(|(b, _)| rect.contains_center(b))
        .map(|(b, &l)| {
            let clipped = BBox::new(
                b.x1.max(r.x1),
                b.y1.max(r.y1),
                b.x2.min(r.x2),
                b.y2.min(r.y2),
            );
            (clipped.translate(-r.x1, -r.y1), l)
        })
        .unzip();
    Ok(ImageSample {
        image: DenseArray::new(vec![rect.height, rect.width, 3], data)?,
        boxes,
        labels,
    })
}

/// Picks a minimum-IoU threshold, then tries up to `params.trials` candidate
/// crops. A candidate is accepted when it contains at least one box center
/// and one of those boxes overlaps it with IoU at or above the threshold.
/// Returns the input unchanged when no candidate qualifies.
pub fn random_iou_crop(s: &ImageSample, rng: &mut impl Rng, params: &IouCropParams) -> ImageSample {
    if s.boxes.is_empty() || params.thresholds.is_empty() {
        return s.clone();
    }
    let threshold = params.thresholds[rng.random_range(0..params.thresholds.len())];
    for _ in 0..params.trials {
        let rect = sample_crop_candidate(rng, s.width(), s.height(), params);
        let crop_box = rect.as_box();
        let accepted = s
            .boxes
            .iter()
            .filter(|b| rect.contains_center(b))
            .any(|b| b.iou(&crop_box) >= threshold);
        if accepted {
            return crop_to(s, rect).expect("candidate lies inside the image");
        }
    }
    s.clone()
}

pub const DEFAULT_SIZES: [usize; 11] = [480, 512, 544, 576, 608, 640, 672, 704, 736, 768, 800];

/// Uniform choice from `sizes`.
pub fn multiscale_select(rng: &mut impl Rng, sizes: &[usize]) -> Result<usize> {
    if sizes.is_empty() {
        return Err(Error::InvalidArgument(
            "multiscale size list is empty".into(),
        ));
    }
    Ok(sizes[rng.random_range(0..sizes.len())])
}

/// Bilinear resize with half-pixel centers and edge clamping. Boxes are
/// scaled by the same per-axis factors as the image.
pub fn resize_to(s: &ImageSample, out_w: usize, out_h: usize) -> Result<ImageSample> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidArgument("resize target is empty".into()));
    }
    let (w, h) = (s.width(), s.height());
    let (sx, sy) = (w as f64 / out_w as f64, h as f64 / out_h as f64);
    let src = s.image.data();
    let px = |x: usize, y: usize, c: usize| src[(y * w + x) * 3 + c];
    let mut out = DenseArray::zeros(&[out_h, out_w, 3]);
    for y in 0..out_h {
        let v = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = v.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = v - y0 as f64;
        for x in 0..out_w {
            let u = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = u.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = u - x0 as f64;
            for c in 0..3 {
                let top = px(x0, y0, c) + fx * (px(x1, y0, c) - px(x0, y0, c));
                let bottom = px(x0, y1, c) + fx * (px(x1, y1, c) - px(x0, y1, c));
                let value = top + fy * (bottom - top);
                out.set(&[y, x, c], value.clamp(0.0, 1.0));
            }
        }
    }
    let (fx, fy) = (out_w as f64 / w as f64, out_h as f64 / h as f64);
    let boxes = s
        .boxes
        .iter()
        .map(|b| {
            if fx == 1.0 && fy == 1.0 {
                *b
            } else {
                BBox::new(
                    b.x1 * fx,
                    b.y1 * fy,
                    (b.x2 * fx).min(out_w as f64),
                    (b.y2 * fy).min(out_h as f64),
                )
            }
        })
        .collect();
    Ok(ImageSample {
        image: out,
        boxes,
        labels: s.labels.clone(),
    })
}
