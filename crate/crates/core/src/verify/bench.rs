use std::hint::black_box;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::array::DenseArray;
use crate::error::{Error, Result};
use crate::kv::{join_list, KvFile};
use crate::pyramid::{parse_shape_list, SpatialShape};
use crate::sampling::{sample_with, SamplingMode};

use super::{digest_str, random_array, CaseRecord, Report};

pub const MIN_ITERATIONS: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    /// Each entry is one pyramid, finest level first.
    pub pyramids: Vec<Vec<SpatialShape>>,
    /// Base budget; every pyramid is also run with each count doubled.
    pub points_per_level: Vec<usize>,
    pub heads: usize,
    pub head_dim: usize,
    pub num_query: usize,
    pub batch: usize,
    pub iterations: usize,
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let pyr = |s: &str| parse_shape_list(s).expect("valid default shapes");
        Self {
            pyramids: vec![
                pyr("20x20,10x10,5x5"),
                pyr("40x40,20x20,10x10"),
                pyr("80x80,40x40,20x20"),
            ],
            points_per_level: vec![4, 4, 4],
            heads: 8,
            head_dim: 32,
            num_query: 300,
            batch: 1,
            iterations: 50,
            warmup: 5,
        }
    }
}

const KEYS: &[&str] = &[
    "pyramids",
    "points_per_level",
    "heads",
    "head_dim",
    "num_query",
    "batch",
    "iterations",
    "warmup",
];

impl BenchConfig {
    /// Key/value form; `pyramids` uses the syntax of [`BenchConfig::parse_pyramids`].
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KvFile::parse(text)?;
        kv.reject_unknown(KEYS)?;
        let d = Self::default();
        let pyramids = match kv.get_str("pyramids") {
            Some(s) => Self::parse_pyramids(s)?,
            None => d.pyramids,
        };
        let cfg = Self {
            pyramids,
            points_per_level: kv
                .get_list("points_per_level")?
                .unwrap_or(d.points_per_level),
            heads: kv.get("heads")?.unwrap_or(d.heads),
            head_dim: kv.get("head_dim")?.unwrap_or(d.head_dim),
            num_query: kv.get("num_query")?.unwrap_or(d.num_query),
            batch: kv.get("batch")?.unwrap_or(d.batch),
            iterations: kv.get("iterations")?.unwrap_or(d.iterations),
            warmup: kv.get("warmup")?.unwrap_or(d.warmup),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `"80x80,40x40,20x20;40x40,20x20,10x10"`: pyramids separated by
    /// semicolons, levels by commas.
    pub fn parse_pyramids(s: &str) -> Result<Vec<Vec<SpatialShape>>> {
        s.split(';')
            .filter(|p| !p.trim().is_empty())
            .map(parse_shape_list)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations < MIN_ITERATIONS {
            return Err(Error::InvalidArgument(format!(
                "at least {MIN_ITERATIONS} timed iterations are required, got {}",
                self.iterations
            )));
        }
        if self.pyramids.is_empty() {
            return Err(Error::InvalidArgument(
                "no pyramid shapes to benchmark".into(),
            ));
        }
        for p in &self.pyramids {
            if p.len() != self.points_per_level.len() {
                return Err(Error::InvalidArgument(format!(
                    "pyramid {} has {} levels but the point budget has {}",
                    join_list(p),
                    p.len(),
                    self.points_per_level.len()
                )));
            }
            if p.iter().any(|s| s.height == 0 || s.width == 0) {
                return Err(Error::InvalidArgument(format!(
                    "pyramid {} has an empty level",
                    join_list(p)
                )));
            }
        }
        if self.heads == 0 || self.head_dim == 0 || self.num_query == 0 || self.batch == 0 {
            return Err(Error::InvalidArgument(
                "heads, head_dim, num_query and batch must be positive".into(),
            ));
        }
        if self.points_per_level.iter().all(|&k| k == 0) {
            return Err(Error::InvalidArgument("the point budget is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub operator: String,
    pub mode: SamplingMode,
    pub pyramid: String,
    pub points_per_level: Vec<usize>,
    /// Identical for the bilinear and discrete runs of one configuration.
    pub config_digest: String,
    pub iterations: usize,
    pub warmup: usize,
    pub median_s: f64,
    pub p10_s: f64,
    pub p90_s: f64,
    pub samples_per_sec: f64,
    /// Bilinear median over discrete median for this configuration.
    pub speedup_discrete_over_bilinear: f64,
    /// Median at the doubled budget over the median at the base budget,
    /// filled on the doubled-budget rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_scaling: Option<f64>,
}

struct Inputs {
    values: Vec<DenseArray>,
    locations: Vec<DenseArray>,
}

fn make_inputs(seed: u64, cfg: &BenchConfig, pyramid: &[SpatialShape], points: &[usize]) -> Inputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = pyramid
        .iter()
        .map(|s| {
            random_array(
                &mut rng,
                &[cfg.batch, cfg.heads, cfg.head_dim, s.height, s.width],
                -1.0,
                1.0,
            )
        })
        .collect();
    let locations = points
        .iter()
        .map(|&k| {
            random_array(
                &mut rng,
                &[cfg.batch, cfg.num_query, cfg.heads, k, 2],
                0.0,
                1.0,
            )
        })
        .collect();
    Inputs { values, locations }
}

/// One call of the operator: sample every level at its points.
fn multi_scale_sample(mode: SamplingMode, inputs: &Inputs) -> Result<f64> {
    let mut acc = 0.0;
    for (v, l) in inputs.values.iter().zip(&inputs.locations) {
        let out = sample_with(mode, black_box(v), black_box(l))?;
        acc += out.data().first().copied().unwrap_or(0.0);
    }
    Ok(acc)
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let idx = (q * (sorted.len() - 1) as f64).round() as usize;
    sorted[idx]
}

fn time_operator(
    mode: SamplingMode,
    inputs: &Inputs,
    cfg: &BenchConfig,
) -> Result<(f64, f64, f64)> {
    for _ in 0..cfg.warmup {
        black_box(multi_scale_sample(mode, inputs)?);
    }
    let mut times = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let start = Instant::now();
        black_box(multi_scale_sample(mode, inputs)?);
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok((
        percentile(&times, 0.5),
        percentile(&times, 0.1),
        percentile(&times, 0.9),
    ))
}

/// Times bilinear against discrete multi-level sampling on identical inputs
/// for every pyramid, at the base budget and at twice the base budget. Only
/// completion and the validity of the statistics are checked; the speedup is
/// recorded.
pub fn run_bench(seed: u64, cfg: &BenchConfig) -> Result<Report> {
    cfg.validate()?;
    let doubled: Vec<usize> = cfg.points_per_level.iter().map(|k| 2 * k).collect();
    let mut results: Vec<BenchResult> = Vec::new();
    let mut cases = Vec::new();
    for (pi, pyramid) in cfg.pyramids.iter().enumerate() {
        let pyramid_name = join_list(pyramid);
        let mut base_medians = [0.0; 2];
        for (bi, points) in [&cfg.points_per_level, &doubled].into_iter().enumerate() {
            let inputs = make_inputs(seed.wrapping_add(pi as u64), cfg, pyramid, points);
            let digest = digest_str(&format!(
                "multi_scale_sample|{pyramid_name}|{}|{}|{}|{}|{}|{}|{seed}",
                join_list(points),
                cfg.heads,
                cfg.head_dim,
                cfg.num_query,
                cfg.batch,
                cfg.iterations
            ));
            let samples =
                (cfg.batch * cfg.num_query * cfg.heads * points.iter().sum::<usize>()) as f64;
            let mut pair = Vec::new();
            for (mi, mode) in [SamplingMode::Bilinear, SamplingMode::Discrete]
                .into_iter()
                .enumerate()
            {
                let (median, p10, p90) = time_operator(mode, &inputs, cfg)?;
                let budget_scaling = (bi == 1).then(|| median / base_medians[mi]);
                if bi == 0 {
                    base_medians[mi] = median;
                }
                pair.push(BenchResult {
                    operator: "multi_scale_sample".into(),
                    mode,
                    pyramid: pyramid_name.clone(),
                    points_per_level: points.clone(),
                    config_digest: digest.clone(),
                    iterations: cfg.iterations,
                    warmup: cfg.warmup,
                    median_s: median,
                    p10_s: p10,
                    p90_s: p90,
                    samples_per_sec: samples / median,
                    speedup_discrete_over_bilinear: f64::NAN,
                    budget_scaling,
                });
            }
            let speedup = pair[0].median_s / pair[1].median_s;
            let label = format!("bench.{pyramid_name}.points[{}]", join_list(points));
            for r in &mut pair {
                r.speedup_discrete_over_bilinear = speedup;
                let valid = r.iterations >= MIN_ITERATIONS
                    && [r.p10_s, r.median_s, r.p90_s]
                        .iter()
                        .all(|t| t.is_finite() && *t > 0.0)
                    && r.p10_s <= r.median_s
                    && r.median_s <= r.p90_s;
                cases.push(
                    CaseRecord::check(
                        format!("{label}.{}.valid_stats", r.mode.as_str()),
                        &digest,
                        valid,
                    )
                    .detail(format!("median {:.3e} s, speedup {speedup:.3}", r.median_s)),
                );
            }
            cases.push(CaseRecord::check(
                format!("{label}.identical_config"),
                &digest,
                pair[0].config_digest == pair[1].config_digest,
            ));
            results.extend(pair);
        }
    }
    let mut report = Report::new("bench", seed, cases);
    report.bench = results;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchConfig {
        BenchConfig {
            pyramids: BenchConfig::parse_pyramids("8x8,4x4;6x10,3x5;2x2,1x1").unwrap(),
            points_per_level: vec![2, 1],
            heads: 2,
            head_dim: 4,
            num_query: 10,
            iterations: 30,
            warmup: 1,
            ..Default::default()
        }
    }

    #[test]
    fn small_run_is_valid() {
        let r = run_bench(1, &small()).unwrap();
        assert!(r.pass);
        assert_eq!(r.bench.len(), 3 * 2 * 2);
        assert!(r
            .bench
            .iter()
            .all(|b| b.speedup_discrete_over_bilinear > 0.0));
        assert_eq!(
            r.bench
                .iter()
                .filter(|b| b.budget_scaling.is_some())
                .count(),
            6
        );
    }

    #[test]
    fn too_few_iterations_is_an_error() {
        assert!(run_bench(
            1,
            &BenchConfig {
                iterations: 0,
                ..small()
            }
        )
        .is_err());
        assert!(run_bench(
            1,
            &BenchConfig {
                iterations: 29,
                ..small()
            }
        )
        .is_err());
    }

    #[test]
    fn parses_key_value_form() {
        let cfg = BenchConfig::parse(
            "pyramids = 8x8,4x4;2x2,1x1\npoints_per_level = 2,1\niterations = 40",
        )
        .unwrap();
        assert_eq!(cfg.pyramids.len(), 2);
        assert_eq!(cfg.iterations, 40);
        assert!(BenchConfig::parse("iterations = 5").is_err());
        assert!(BenchConfig::parse("pyramids = 8x8").is_err());
    }

    #[test]
    fn percentiles_use_nearest_rank() {
        let v: Vec<f64> = (1..=11).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.5), 6.0);
        assert_eq!(percentile(&v, 0.1), 2.0);
        assert_eq!(percentile(&v, 0.9), 10.0);
    }
}
