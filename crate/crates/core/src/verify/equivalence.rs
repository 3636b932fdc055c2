use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::array::DenseArray;
use crate::error::Result;
use crate::sampling::{sample_with, SamplingMode};

use super::{digest_arrays, random_array, relative_error, CaseRecord, Report};

const SHAPES: [(usize, usize); 5] = [(8, 8), (7, 5), (13, 11), (1, 1), (3, 17)];
const DELTAS: [f64; 3] = [0.25, 0.1, 0.01];
const HEADS: usize = 2;
const CHANNELS: usize = 3;

/// A normalized coordinate `x` with `x · n == i + 0.5` exactly, searched
/// within a few ulps of `(i + 0.5) / n`. Not every pixel of every extent has
/// one.
pub fn pixel_center_coord(i: usize, n: usize) -> Option<f64> {
    if i >= n {
        return None;
    }
    let target = i as f64 + 0.5;
    let x0 = target / n as f64;
    (-4i64..=4)
        .map(|k| f64::from_bits((x0.to_bits() as i64 + k) as u64))
        .find(|x| *x * n as f64 == target)
}

/// Pixel-center agreement, convergence of bilinear to discrete sampling near
/// a center, and linearity of both samplers in the value map.
pub fn run_equivalence(seed: u64) -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    for (h, w) in SHAPES {
        cases.push(pixel_center_case(&mut rng, h, w)?);
    }
    for trial in 0..3 {
        cases.extend(convergence_cases(&mut rng, trial)?);
    }
    for (h, w) in SHAPES {
        for mode in [SamplingMode::Bilinear, SamplingMode::Discrete] {
            cases.push(linearity_case(&mut rng, h, w, mode)?);
        }
    }
    Ok(Report::new("equivalence", seed, cases))
}

fn pixel_center_case(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Result<CaseRecord> {
    let values = random_array(rng, &[1, HEADS, CHANNELS, h, w], -1.0, 1.0);
    let mut coords = Vec::new();
    let mut skipped = 0;
    for j in 0..h {
        for i in 0..w {
            match (pixel_center_coord(i, w), pixel_center_coord(j, h)) {
                (Some(x), Some(y)) => coords.extend([x, y]),
                _ => skipped += 1,
            }
        }
    }
    let n = coords.len() / 2;
    // Every head samples the same centers.
    let mut loc = DenseArray::zeros(&[1, n, HEADS, 1, 2]);
    for q in 0..n {
        for head in 0..HEADS {
            let at = (q * HEADS + head) * 2;
            loc.data_mut()[at] = coords[2 * q];
            loc.data_mut()[at + 1] = coords[2 * q + 1];
        }
    }
    let bil = sample_with(SamplingMode::Bilinear, &values, &loc)?;
    let dis = sample_with(SamplingMode::Discrete, &values, &loc)?;
    let mismatches = bil
        .data()
        .iter()
        .zip(dis.data())
        .filter(|(a, b)| a.to_bits() != b.to_bits())
        .count();
    Ok(CaseRecord::within(
        format!("pixel_center.{h}x{w}"),
        digest_arrays([&values, &loc]),
        0.0,
        mismatches as f64,
        0.0,
    )
    .detail(format!("centers={n} unrepresentable={skipped}")))
}

fn convergence_cases(rng: &mut ChaCha8Rng, trial: usize) -> Result<Vec<CaseRecord>> {
    let (h, w) = (6, 9);
    let values = random_array(rng, &[1, 1, CHANNELS, h, w], -1.0, 1.0);
    let (ci, cj) = (rng.random_range(1..w - 1), rng.random_range(1..h - 1));
    let v = |i: usize, j: usize, c: usize| values.at(&[0, 0, c, j, i]);
    let digest = digest_arrays([&values]);
    let mut cases = Vec::new();
    for (label, di, dj) in [
        ("+x", 1i64, 0i64),
        ("-x", -1, 0),
        ("+y", 0, 1),
        ("-y", 0, -1),
    ] {
        let (ni, nj) = ((ci as i64 + di) as usize, (cj as i64 + dj) as usize);
        let mut diffs = Vec::new();
        for delta in DELTAS {
            let u = ci as f64 + 0.5 + di as f64 * delta;
            let t = cj as f64 + 0.5 + dj as f64 * delta;
            let loc = DenseArray::new(vec![1, 1, 1, 1, 2], vec![u / w as f64, t / h as f64])?;
            let bil = sample_with(SamplingMode::Bilinear, &values, &loc)?;
            let dis = sample_with(SamplingMode::Discrete, &values, &loc)?;
            let actual = bil
                .data()
                .iter()
                .zip(dis.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            let expected = (0..CHANNELS)
                .map(|c| delta * (v(ni, nj, c) - v(ci, cj, c)).abs())
                .fold(0.0, f64::max);
            cases.push(CaseRecord::within(
                format!("convergence.{trial}.{label}.delta{delta}"),
                digest.clone(),
                expected,
                actual,
                1e-12,
            ));
            diffs.push(actual);
        }
        let monotone = diffs.windows(2).all(|p| p[1] <= p[0]);
        cases.push(
            CaseRecord::check(
                format!("convergence.{trial}.{label}.monotone"),
                digest.clone(),
                monotone,
            )
            .detail(format!("differences {diffs:?} at deltas {DELTAS:?}")),
        );
    }
    Ok(cases)
}

fn linearity_case(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    mode: SamplingMode,
) -> Result<CaseRecord> {
    let a = random_array(rng, &[2, HEADS, CHANNELS, h, w], -1.0, 1.0);
    let b = random_array(rng, &[2, HEADS, CHANNELS, h, w], -1.0, 1.0);
    let loc = random_array(rng, &[2, 7, HEADS, 3, 2], -0.2, 1.2);
    let (alpha, beta): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    let mixed = a.scale(alpha).axpy(beta, &b)?;
    let lhs = sample_with(mode, &mixed, &loc)?;
    let rhs = sample_with(mode, &a, &loc)?
        .scale(alpha)
        .axpy(beta, &sample_with(mode, &b, &loc)?)?;
    Ok(CaseRecord::at_most(
        format!("linearity.{}.{h}x{w}", mode.as_str()),
        digest_arrays([&a, &b, &loc]),
        1e-12,
        relative_error(lhs.data(), rhs.data()),
        0.0,
    ))
}
