use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::array::DenseArray;
use crate::attention::{
    compute_sampling_locations, init_params, msda_backward, msda_forward, DeformAttnConfig,
    DeformAttnParams,
};
use crate::error::{Error, Result};
use crate::kv::{join_list, KvFile};
use crate::pyramid::{FeaturePyramid, QueryBatch, SpatialShape};
use crate::sampling::{boundary_distance, sample_backward_with, sample_with, SamplingMode};

use super::{digest_arrays, random_array, relative_error, CaseRecord, Report};

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub shapes: Vec<SpatialShape>,
    pub batch: usize,
    pub channels: usize,
    pub heads: usize,
    pub num_query: usize,
    pub points_per_level: Vec<usize>,
    pub sampling_mode: SamplingMode,
    /// Central-difference step.
    pub fd_eps: f64,
    /// Minimum distance in pixels between any sampling coordinate and the
    /// nearest kink or rounding boundary.
    pub kink_margin: f64,
    /// Maximum norm-wise relative error per tensor.
    pub tolerance: f64,
    pub max_attempts: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            shapes: vec![
                SpatialShape::new(8, 8),
                SpatialShape::new(4, 4),
                SpatialShape::new(2, 2),
            ],
            batch: 1,
            channels: 16,
            heads: 2,
            num_query: 5,
            points_per_level: vec![4, 3, 2],
            sampling_mode: SamplingMode::Bilinear,
            fd_eps: 1e-6,
            kink_margin: 1e-3,
            tolerance: 1e-4,
            max_attempts: 64,
        }
    }
}

const KEYS: &[&str] = &[
    "shapes",
    "batch",
    "channels",
    "heads",
    "num_query",
    "points_per_level",
    "sampling_mode",
    "fd_eps",
    "kink_margin",
    "tolerance",
    "max_attempts",
];

impl GradcheckConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KvFile::parse(text)?;
        kv.reject_unknown(KEYS)?;
        let d = Self::default();
        let cfg = Self {
            shapes: kv.get_list("shapes")?.unwrap_or(d.shapes),
            batch: kv.get("batch")?.unwrap_or(d.batch),
            channels: kv.get("channels")?.unwrap_or(d.channels),
            heads: kv.get("heads")?.unwrap_or(d.heads),
            num_query: kv.get("num_query")?.unwrap_or(d.num_query),
            points_per_level: kv
                .get_list("points_per_level")?
                .unwrap_or(d.points_per_level),
            sampling_mode: kv.get("sampling_mode")?.unwrap_or(d.sampling_mode),
            fd_eps: kv.get("fd_eps")?.unwrap_or(d.fd_eps),
            kink_margin: kv.get("kink_margin")?.unwrap_or(d.kink_margin),
            tolerance: kv.get("tolerance")?.unwrap_or(d.tolerance),
            max_attempts: kv.get("max_attempts")?.unwrap_or(d.max_attempts),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::default();
        kv.insert("shapes", join_list(&self.shapes));
        kv.insert("batch", self.batch);
        kv.insert("channels", self.channels);
        kv.insert("heads", self.heads);
        kv.insert("num_query", self.num_query);
        kv.insert("points_per_level", join_list(&self.points_per_level));
        kv.insert("sampling_mode", self.sampling_mode.as_str());
        kv.insert("fd_eps", self.fd_eps);
        kv.insert("kink_margin", self.kink_margin);
        kv.insert("tolerance", self.tolerance);
        kv.insert("max_attempts", self.max_attempts);
        kv
    }

    pub fn attention_config(&self) -> DeformAttnConfig {
        DeformAttnConfig {
            heads: self.heads,
            points_per_level: self.points_per_level.clone(),
            num_query: self.num_query,
            num_decoder: 1,
            embed_dim: self.channels,
            sampling_mode: self.sampling_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention_config().validate()?;
        if self.shapes.len() != self.points_per_level.len() {
            return Err(Error::InvalidArgument(format!(
                "{} shapes for {} point counts",
                self.shapes.len(),
                self.points_per_level.len()
            )));
        }
        if self.batch == 0 || self.num_query == 0 || self.max_attempts == 0 {
            return Err(Error::InvalidArgument(
                "batch, num_query and max_attempts must be positive".into(),
            ));
        }
        if self.shapes.iter().any(|s| s.height == 0 || s.width == 0) {
            return Err(Error::InvalidArgument(
                "every level needs a nonzero spatial extent".into(),
            ));
        }
        if !(self.fd_eps > 0.0 && self.kink_margin > 0.0 && self.tolerance > 0.0) {
            return Err(Error::InvalidArgument(
                "fd_eps, kink_margin and tolerance must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Runs the sampling and attention gradient suites in the configured mode.
///
/// In bilinear mode every tensor is compared against central differences. In
/// discrete mode the location, offset and reference-point gradients must be
/// exactly zero and the remaining tensors are compared against central
/// differences.
pub fn run_gradcheck(seed: u64, cfg: &GradcheckConfig) -> Result<Report> {
    cfg.validate()?;
    let mut cases = Vec::new();
    for (l, shape) in cfg.shapes.iter().enumerate() {
        cases.extend(sampling_cases(seed.wrapping_add(l as u64), cfg, *shape)?);
    }
    cases.extend(attention_cases(seed, cfg)?);
    Ok(Report::new("gradcheck", seed, cases))
}

fn weighted_sum(a: &DenseArray, w: &DenseArray) -> f64 {
    a.data().iter().zip(w.data()).map(|(x, y)| x * y).sum()
}

/// Central differences of `f` with respect to every entry of `x`.
fn numeric_grad(
    x: &mut DenseArray,
    eps: f64,
    mut f: impl FnMut(&DenseArray) -> Result<f64>,
) -> Result<DenseArray> {
    let mut g = DenseArray::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + eps;
        let plus = f(x)?;
        x.data_mut()[i] = orig - eps;
        let minus = f(x)?;
        x.data_mut()[i] = orig;
        g.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(g)
}

fn compare(
    name: String,
    digest: &str,
    analytic: &DenseArray,
    numeric: &DenseArray,
    tol: f64,
) -> CaseRecord {
    let err = relative_error(analytic.data(), numeric.data());
    let max_abs = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    CaseRecord::at_most(name, digest, tol, err, 0.0).detail(format!(
        "entries={} max_abs_diff={max_abs:e} grad_norm_max={:e}",
        analytic.len(),
        analytic.max_abs()
    ))
}

fn exact_zero(name: String, digest: &str, g: &DenseArray) -> CaseRecord {
    CaseRecord::within(name, digest, 0.0, g.max_abs(), 0.0).detail(format!("entries={}", g.len()))
}

fn clear_of_kinks(u: f64, margin: f64) -> bool {
    boundary_distance(u) >= margin
}

fn sampling_cases(
    seed: u64,
    cfg: &GradcheckConfig,
    shape: SpatialShape,
) -> Result<Vec<CaseRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, heads, ch) = (cfg.batch, cfg.heads, cfg.channels / cfg.heads);
    let points = 3;
    let mut values = random_array(
        &mut rng,
        &[b, heads, ch, shape.height, shape.width],
        -1.0,
        1.0,
    );
    let mut loc = DenseArray::zeros(&[b, cfg.num_query, heads, points, 2]);
    for (i, v) in loc.data_mut().iter_mut().enumerate() {
        let extent = if i % 2 == 0 {
            shape.width
        } else {
            shape.height
        } as f64;
        *v = loop {
            let x: f64 = rng.random_range(-0.25..1.25);
            if clear_of_kinks(x * extent, cfg.kink_margin) {
                break x;
            }
        };
    }
    let upstream = random_array(&mut rng, &[b, cfg.num_query, heads, points, ch], -1.0, 1.0);
    let mode = cfg.sampling_mode;
    let digest = digest_arrays([&values, &loc, &upstream]);
    let grads = sample_backward_with(mode, &values, &loc, &upstream)?;
    let prefix = format!("sampling.{}.{shape}", mode.as_str());

    let loc_fixed = loc.clone();
    let num_values = numeric_grad(&mut values, cfg.fd_eps, |v| {
        Ok(weighted_sum(&sample_with(mode, v, &loc_fixed)?, &upstream))
    })?;
    let mut cases = vec![compare(
        format!("{prefix}.d_values"),
        &digest,
        &grads.d_values,
        &num_values,
        cfg.tolerance,
    )];
    match mode {
        SamplingMode::Bilinear => {
            let num_loc = numeric_grad(&mut loc, cfg.fd_eps, |l| {
                Ok(weighted_sum(&sample_with(mode, &values, l)?, &upstream))
            })?;
            cases.push(compare(
                format!("{prefix}.d_coords"),
                &digest,
                &grads.d_coords,
                &num_loc,
                cfg.tolerance,
            ));
        }
        SamplingMode::Discrete => cases.push(exact_zero(
            format!("{prefix}.d_coords"),
            &digest,
            &grads.d_coords,
        )),
    }
    Ok(cases)
}

struct AttnProblem {
    cfg: DeformAttnConfig,
    pyramid: FeaturePyramid,
    embeddings: DenseArray,
    refs: DenseArray,
    params: DeformAttnParams,
    upstream: DenseArray,
}

impl AttnProblem {
    fn generate(rng: &mut ChaCha8Rng, gc: &GradcheckConfig) -> Result<Self> {
        let cfg = gc.attention_config();
        let (b, c, nq) = (gc.batch, gc.channels, gc.num_query);
        let mut params = init_params(&cfg, rng.random())?;
        for t in params.tensors_mut() {
            let jitter = random_array(rng, t.shape(), -0.3, 0.3);
            *t = t.axpy(1.0, &jitter)?;
        }
        let levels = gc
            .shapes
            .iter()
            .map(|s| random_array(rng, &[b, c, s.height, s.width], -1.0, 1.0))
            .collect();
        Ok(Self {
            pyramid: FeaturePyramid::from_arrays(levels)?,
            embeddings: random_array(rng, &[b, nq, c], -1.0, 1.0),
            refs: random_array(rng, &[b, nq, 2], 0.1, 0.9),
            upstream: random_array(rng, &[b, nq, c], -1.0, 1.0),
            params,
            cfg,
        })
    }

    fn queries(&self) -> Result<QueryBatch> {
        QueryBatch::new(self.embeddings.clone(), self.refs.clone())
    }

    fn loss(&self) -> Result<f64> {
        let (out, _) = msda_forward(&self.pyramid, &self.queries()?, &self.params, &self.cfg)?;
        Ok(weighted_sum(&out, &self.upstream))
    }

    fn min_boundary_distance(&self) -> Result<f64> {
        let shapes = self.pyramid.spatial_shapes();
        let locs = compute_sampling_locations(&self.queries()?, &self.params, &self.cfg, &shapes)?;
        let mut min = f64::INFINITY;
        for (loc, s) in locs.iter().zip(&shapes) {
            for pair in loc.data().chunks_exact(2) {
                min = min.min(boundary_distance(pair[0] * s.width as f64));
                min = min.min(boundary_distance(pair[1] * s.height as f64));
            }
        }
        Ok(min)
    }

    fn digest(&self) -> String {
        let mut arrays: Vec<&DenseArray> =
            self.pyramid.levels().iter().map(|l| l.values()).collect();
        arrays.extend([&self.embeddings, &self.refs, &self.upstream]);
        arrays.extend(self.params.tensors());
        digest_arrays(arrays)
    }
}

enum Target {
    Level(usize),
    Queries,
    Refs,
    Param(usize),
}

impl AttnProblem {
    fn slot_mut(&mut self, t: &Target) -> &mut DenseArray {
        match t {
            Target::Level(l) => self.pyramid.levels_mut()[*l].values_mut(),
            Target::Queries => &mut self.embeddings,
            Target::Refs => &mut self.refs,
            Target::Param(i) => self
                .params
                .tensors_mut()
                .into_iter()
                .nth(*i)
                .expect("parameter index"),
        }
    }

    fn numeric(&mut self, t: &Target, eps: f64) -> Result<DenseArray> {
        let mut x = self.slot_mut(t).clone();
        let g = numeric_grad(&mut x, eps, |v| {
            *self.slot_mut(t) = v.clone();
            self.loss()
        });
        *self.slot_mut(t) = x;
        g
    }
}

fn attention_cases(seed: u64, gc: &GradcheckConfig) -> Result<Vec<CaseRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut problem = None;
    let mut closest = 0.0;
    for _ in 0..gc.max_attempts {
        let candidate = AttnProblem::generate(&mut rng, gc)?;
        closest = candidate.min_boundary_distance()?;
        if closest >= gc.kink_margin {
            problem = Some(candidate);
            break;
        }
    }
    let Some(mut problem) = problem else {
        return Ok(vec![CaseRecord::check(
            "attention.kink_free_instance",
            "",
            false,
        )
        .detail(format!(
            "no instance with every coordinate {} px from a kink in {} attempts",
            gc.kink_margin, gc.max_attempts
        ))]);
    };
    let digest = problem.digest();
    let queries = problem.queries()?;
    let (_, inter) = msda_forward(&problem.pyramid, &queries, &problem.params, &problem.cfg)?;
    let grads = msda_backward(
        &problem.pyramid,
        &queries,
        &problem.params,
        &problem.cfg,
        &inter,
        &problem.upstream,
    )?;
    let mode = gc.sampling_mode;
    let prefix = format!("attention.{}", mode.as_str());

    let mut targets: Vec<(String, Target, &DenseArray)> = grads
        .pyramid
        .iter()
        .enumerate()
        .map(|(l, g)| (format!("pyramid.level{l}"), Target::Level(l), g))
        .collect();
    targets.push(("queries".into(), Target::Queries, &grads.queries));
    targets.push((
        "reference_points".into(),
        Target::Refs,
        &grads.reference_points,
    ));
    let param_grads = [
        &grads.value_proj.weight,
        &grads.value_proj.bias,
        &grads.offset_proj.weight,
        &grads.offset_proj.bias,
        &grads.attn_proj.weight,
        &grads.attn_proj.bias,
        &grads.output_proj.weight,
        &grads.output_proj.bias,
    ];
    for (i, ((name, _), g)) in problem.params.named_tensors().zip(param_grads).enumerate() {
        targets.push((name.to_string(), Target::Param(i), g));
    }

    let mut cases = Vec::new();
    for (name, target, analytic) in targets {
        let location_path = matches!(target, Target::Refs) || name.starts_with("offset_proj");
        let full = format!("{prefix}.{name}");
        if mode == SamplingMode::Discrete && location_path {
            cases.push(exact_zero(full, &digest, analytic));
        } else {
            let numeric = problem.numeric(&target, gc.fd_eps)?;
            cases.push(compare(full, &digest, analytic, &numeric, gc.tolerance));
        }
    }
    if let Some(first) = cases.first_mut() {
        let note = format!("closest coordinate {closest:.4} px from a kink");
        first.detail = Some(match first.detail.take() {
            Some(d) => format!("{d} {note}"),
            None => note,
        });
    }
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_kv() {
        let cfg = GradcheckConfig {
            sampling_mode: SamplingMode::Discrete,
            ..Default::default()
        };
        let back = GradcheckConfig::parse(&cfg.to_kv().to_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_rejects_unknown_keys_and_mismatched_levels() {
        assert!(GradcheckConfig::parse("bogus = 1").is_err());
        assert!(GradcheckConfig::parse("shapes = 8x8,4x4").is_err());
        assert!(GradcheckConfig::parse("heads = 3").is_err());
    }

    #[test]
    fn tiny_bilinear_suite_passes() {
        let cfg = GradcheckConfig {
            shapes: vec![SpatialShape::new(3, 4), SpatialShape::new(2, 2)],
            channels: 4,
            num_query: 2,
            points_per_level: vec![2, 1],
            ..Default::default()
        };
        let r = run_gradcheck(3, &cfg).unwrap();
        for c in r.failures() {
            eprintln!("{c:?}");
        }
        assert!(r.pass);
    }
}
