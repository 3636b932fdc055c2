use msdeform::attention::{
    compute_sampling_locations, count_sampling_points, init_params, DeformAttnConfig,
};
use msdeform::pyramid::{QueryBatch, SpatialShape};
use msdeform::sampling::{bilinear_sample_into, discrete_sample_into, MapLayout};
use msdeform::{DenseArray, SamplingMode};

pub const MAX_LEVELS: usize = 4;
pub const MAX_SIDE: usize = 512;

#[derive(Debug, thiserror::Error)]
pub enum DemoError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Core(#[from] msdeform::Error),
}

pub type Result<T> = std::result::Result<T, DemoError>;

fn input(msg: impl Into<String>) -> DemoError {
    DemoError::Input(msg.into())
}

pub fn parse_points(s: &str) -> Result<Vec<usize>> {
    let points = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| input(format!("bad point count {p:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if points.is_empty() || points.len() > MAX_LEVELS {
        return Err(input(format!("between 1 and {MAX_LEVELS} levels")));
    }
    if points.iter().sum::<usize>() == 0 {
        return Err(input("at least one point"));
    }
    Ok(points)
}

/// Checkerboard with a diagonal ramp, so both edges and gradients show up.
pub fn test_pattern(n: usize) -> Vec<f64> {
    (0..n * n)
        .map(|i| {
            let (y, x) = (i / n, i % n);
            let check = if (x + y) % 2 == 0 { 0.35 } else { 0.0 };
            check + 0.65 * (x + y) as f64 / (2 * n.max(2) - 2) as f64
        })
        .collect()
}

pub fn resample_pattern(mode: &str, src: usize, out: usize) -> Result<Vec<f64>> {
    let mode: SamplingMode = mode.parse()?;
    for (name, v) in [("src", src), ("out", out)] {
        if v == 0 || v > MAX_SIDE {
            return Err(input(format!("{name} must be in 1..={MAX_SIDE}, got {v}")));
        }
    }
    let data = test_pattern(src);
    let layout = MapLayout::planar(0, 1, src, src);
    let mut pixels = vec![0.0; out * out];
    for (i, px) in pixels.iter_mut().enumerate() {
        let x = ((i % out) as f64 + 0.5) / out as f64;
        let y = ((i / out) as f64 + 0.5) / out as f64;
        let v = std::slice::from_mut(px);
        match mode {
            SamplingMode::Bilinear => bilinear_sample_into(&data, &layout, x, y, v),
            SamplingMode::Discrete => discrete_sample_into(&data, &layout, x, y, v),
        }
    }
    Ok(pixels)
}

pub fn level_size(level: usize) -> usize {
    64 >> level.min(5)
}

pub fn sampling_pattern(points: &str, heads: usize, ref_x: f64, ref_y: f64) -> Result<Vec<f64>> {
    let points = parse_points(points)?;
    if heads == 0 || heads > 16 {
        return Err(input(format!("heads must be in 1..=16, got {heads}")));
    }
    if !(0.0..=1.0).contains(&ref_x) || !(0.0..=1.0).contains(&ref_y) {
        return Err(input("reference point must lie in [0, 1]²"));
    }
    let cfg = DeformAttnConfig {
        heads,
        points_per_level: points,
        num_query: 1,
        num_decoder: 1,
        embed_dim: heads,
        sampling_mode: SamplingMode::Bilinear,
    };
    let params = init_params(&cfg, 0)?;
    let queries = QueryBatch::new(
        DenseArray::zeros(&[1, 1, heads]),
        DenseArray::new(vec![1, 1, 2], vec![ref_x, ref_y])?,
    )?;
    let shapes: Vec<_> = (0..cfg.num_levels())
        .map(|l| SpatialShape::new(level_size(l), level_size(l)))
        .collect();
    let locations = compute_sampling_locations(&queries, &params, &cfg, &shapes)?;
    let mut rows = Vec::new();
    for (l, loc) in locations.iter().enumerate() {
        let k_l = cfg.points_per_level[l];
        for (i, xy) in loc.data().chunks_exact(2).enumerate() {
            rows.extend_from_slice(&[l as f64, (i / k_l) as f64, xy[0], xy[1]]);
        }
    }
    Ok(rows)
}

pub fn count_points(points: &str, heads: usize, num_query: usize, layers: usize) -> Result<u64> {
    let cfg = DeformAttnConfig {
        heads,
        points_per_level: parse_points(points)?,
        num_query,
        num_decoder: layers,
        ..Default::default()
    };
    Ok(count_sampling_points(&cfg))
}
