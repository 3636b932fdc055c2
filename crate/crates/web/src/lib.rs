//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each export is a thin wrapper over a plain Rust function of the same
//! name in [`demo`], which is what the native tests exercise.

use wasm_bindgen::prelude::*;

pub mod demo;

fn js(e: demo::DemoError) -> JsError {
    JsError::new(&e.to_string())
}

/// Resamples a `src × src` test pattern to `out × out`. Returns row-major
/// intensities in `[0, 1]`.
#[wasm_bindgen]
pub fn resample_pattern(mode: &str, src: usize, out: usize) -> Result<Vec<f64>, JsError> {
    demo::resample_pattern(mode, src, out).map_err(js)
}

/// Initial sampling locations of one query, as `[level, head, x, y]` rows.
#[wasm_bindgen]
pub fn sampling_pattern(
    points: &str,
    heads: usize,
    ref_x: f64,
    ref_y: f64,
) -> Result<Vec<f64>, JsError> {
    demo::sampling_pattern(points, heads, ref_x, ref_y).map_err(js)
}

/// Sampling points across the decoder for the given per-level budget.
#[wasm_bindgen]
pub fn count_points(
    points: &str,
    heads: usize,
    num_query: usize,
    layers: usize,
) -> Result<f64, JsError> {
    demo::count_points(points, heads, num_query, layers)
        .map(|n| n as f64)
        .map_err(js)
}

/// Side length of level `l` in the demo pyramid.
#[wasm_bindgen]
pub fn level_size(level: usize) -> usize {
    demo::level_size(level)
}
