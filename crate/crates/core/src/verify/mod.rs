//! Verification suites behind the command-line tool. Every suite returns a
//! [`Report`] whose overall flag is the conjunction of its cases.

mod bench;
mod equivalence;
mod gradcheck;
mod points;
mod train;

use std::time::{SystemTime, UNIX_EPOCH};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::array::DenseArray;

pub use bench::{run_bench, BenchConfig, BenchResult};
pub use equivalence::{pixel_center_coord, run_equivalence};
pub use gradcheck::{run_gradcheck, GradcheckConfig};
pub use points::{run_points, PointsRequest, REFERENCE_TOTALS};
pub use train::{run_train_toy, TrainSummary};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub name: String,
    pub inputs_digest: String,
    pub expected: f64,
    pub actual: f64,
    pub tolerance: f64,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl CaseRecord {
    /// `|actual - expected| <= tolerance`.
    pub fn within(
        name: impl Into<String>,
        digest: impl Into<String>,
        expected: f64,
        actual: f64,
        tolerance: f64,
    ) -> Self {
        let pass = (actual - expected).abs() <= tolerance;
        Self::with_pass(name, digest, expected, actual, tolerance, pass)
    }

    /// `actual <= expected + tolerance`, for error measures and upper bounds.
    pub fn at_most(
        name: impl Into<String>,
        digest: impl Into<String>,
        bound: f64,
        actual: f64,
        tolerance: f64,
    ) -> Self {
        let pass = actual <= bound + tolerance;
        Self::with_pass(name, digest, bound, actual, tolerance, pass)
    }

    /// A yes/no check recorded as expected 1, actual 1 or 0.
    pub fn check(name: impl Into<String>, digest: impl Into<String>, ok: bool) -> Self {
        Self::with_pass(name, digest, 1.0, if ok { 1.0 } else { 0.0 }, 0.0, ok)
    }

    pub fn with_pass(
        name: impl Into<String>,
        digest: impl Into<String>,
        expected: f64,
        actual: f64,
        tolerance: f64,
        pass: bool,
    ) -> Self {
        Self {
            name: name.into(),
            inputs_digest: digest.into(),
            expected,
            actual,
            tolerance,
            pass: pass && actual.is_finite() == expected.is_finite(),
            detail: None,
        }
    }

    pub fn detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = Some(detail.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub precision: String,
    pub seed: u64,
    /// Seconds since the Unix epoch; excluded from determinism comparisons.
    pub timestamp: u64,
}

impl Environment {
    pub fn now(seed: u64) -> Self {
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            precision: "f64".into(),
            seed,
            timestamp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub suite: String,
    pub cases: Vec<CaseRecord>,
    pub environment: Environment,
    pub pass: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bench: Vec<BenchResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainSummary>,
}

impl Report {
    pub fn new(suite: &str, seed: u64, cases: Vec<CaseRecord>) -> Self {
        let pass = !cases.is_empty() && cases.iter().all(|c| c.pass);
        Self {
            schema_version: SCHEMA_VERSION,
            suite: suite.into(),
            cases,
            environment: Environment::now(seed),
            pass,
            bench: Vec::new(),
            training: None,
        }
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseRecord> {
        self.cases.iter().filter(|c| !c.pass)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Short hex digest of the raw bytes of some arrays.
pub fn digest_arrays<'a>(arrays: impl IntoIterator<Item = &'a DenseArray>) -> String {
    let mut h = Sha256::new();
    for a in arrays {
        for d in a.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in a.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex16(&h.finalize())
}

pub fn digest_str(s: &str) -> String {
    hex16(&Sha256::digest(s.as_bytes()))
}

fn hex16(bytes: &[u8]) -> String {
    bytes[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Norm-wise relative error `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, zero when both
/// vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn random_array(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> DenseArray {
    DenseArray::from_fn(shape, |_| rng.random_range(lo..hi))
}
