use crate::attention::{count_sampling_points, points_preset, DeformAttnConfig};
use crate::error::{Error, Result};
use crate::kv::join_list;

use super::{digest_str, CaseRecord, Report};

/// Reported totals for heads = 8, 300 queries and 3 decoder layers, keyed by
/// the per-query per-head point sum.
pub const REFERENCE_TOTALS: [(usize, u64); 4] =
    [(12, 86_400), (9, 64_800), (6, 43_200), (3, 21_600)];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PointsRequest {
    /// Every preset in the table.
    All,
    Preset(usize),
    Explicit(Vec<usize>),
}

fn table_total(sum: usize) -> Option<u64> {
    REFERENCE_TOTALS
        .iter()
        .find(|(s, _)| *s == sum)
        .map(|(_, t)| *t)
}

pub fn run_points(request: &PointsRequest) -> Result<Report> {
    let lists: Vec<Vec<usize>> = match request {
        PointsRequest::All => REFERENCE_TOTALS
            .iter()
            .map(|(s, _)| points_preset(*s).expect("every table row has a preset"))
            .collect(),
        PointsRequest::Preset(sum) => vec![points_preset(*sum).ok_or_else(|| {
            Error::InvalidArgument(format!("unknown preset {sum} (expected 12, 9, 6 or 3)"))
        })?],
        PointsRequest::Explicit(list) => vec![list.clone()],
    };
    let mut cases = Vec::new();
    for points in lists {
        let cfg = DeformAttnConfig {
            points_per_level: points.clone(),
            ..DeformAttnConfig::default()
        };
        cfg.validate()?;
        let sum = cfg.total_points();
        let expected = table_total(sum).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "point sum {sum} has no reference total (expected 12, 9, 6 or 3)"
            ))
        })?;
        let actual = count_sampling_points(&cfg);
        let name = format!("points[{}]", join_list(&points));
        let digest = digest_str(&format!(
            "{}|{}|{}|{}",
            cfg.heads,
            join_list(&points),
            cfg.num_query,
            cfg.num_decoder
        ));
        cases.push(
            CaseRecord::within(name, digest, expected as f64, actual as f64, 0.0).detail(format!(
                "heads={} num_query={} num_decoder={} sum={sum}",
                cfg.heads, cfg.num_query, cfg.num_decoder
            )),
        );
    }
    Ok(Report::new("points", 0, cases))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_presets_pass() {
        let r = run_points(&PointsRequest::All).unwrap();
        assert_eq!(r.cases.len(), 4);
        assert!(r.pass);
    }

    #[test]
    fn unknown_preset_is_an_error() {
        assert!(run_points(&PointsRequest::Preset(5)).is_err());
        assert!(run_points(&PointsRequest::Explicit(vec![2, 2, 3])).is_err());
    }

    #[test]
    fn explicit_list_with_table_sum() {
        let r = run_points(&PointsRequest::Explicit(vec![6, 4, 2])).unwrap();
        assert!(r.pass);
        assert_eq!(r.cases[0].actual, 86_400.0);
    }
}
