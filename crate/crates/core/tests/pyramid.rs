mod common;

use common::{random, rng};
use msdeform::fixture::{pyramid_from_fixture, pyramid_to_fixture, Fixture, Precision};
use msdeform::pyramid::{level_start_index, parse_shape_list, SpatialShape};
use msdeform::{flatten_pyramid, unflatten_pyramid, FeaturePyramid};
use proptest::prelude::*;

fn arb_pyramid() -> impl Strategy<Value = (u64, usize, usize, Vec<(usize, usize)>)> {
    (
        any::<u64>(),
        1usize..3,
        1usize..4,
        prop::collection::vec((1usize..6, 1usize..6), 1..=4),
    )
}

fn build(seed: u64, b: usize, c: usize, shapes: &[(usize, usize)]) -> FeaturePyramid {
    let mut r = rng(seed);
    FeaturePyramid::from_arrays(
        shapes
            .iter()
            .map(|&(h, w)| random(&mut r, &[b, c, h, w], -1.0, 1.0))
            .collect(),
    )
    .unwrap()
}

proptest! {
    #[test]
    fn flatten_round_trip((seed, b, c, shapes) in arb_pyramid()) {
        let p = build(seed, b, c, &shapes);
        let flat = flatten_pyramid(&p);
        let back = unflatten_pyramid(&flat.values, &flat.spatial_shapes).unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn flattened_rows_follow_level_offsets((seed, b, c, shapes) in arb_pyramid()) {
        let p = build(seed, b, c, &shapes);
        let flat = flatten_pyramid(&p);
        // Oracle: row of (level l, y, x) is Σ_{l'<l} H·W + y·W + x.
        let mut start = 0;
        for (l, &(h, w)) in shapes.iter().enumerate() {
            prop_assert_eq!(flat.level_start_index[l], start);
            for bi in 0..b {
                for y in 0..h {
                    for x in 0..w {
                        for ci in 0..c {
                            let want = p.levels()[l].values().at(&[bi, ci, y, x]);
                            prop_assert_eq!(flat.values.at(&[bi, start + y * w + x, ci]), want);
                        }
                    }
                }
            }
            start += h * w;
        }
        prop_assert_eq!(flat.values.shape()[1], start);
    }

    #[test]
    fn fixture_round_trip_is_exact((seed, b, c, shapes) in arb_pyramid()) {
        let p = build(seed, b, c, &shapes);
        let mut bytes = Vec::new();
        pyramid_to_fixture(&p, Precision::F64).write_to(&mut bytes).unwrap();
        let back = pyramid_from_fixture(&Fixture::read_from(bytes.as_slice()).unwrap()).unwrap();
        prop_assert_eq!(back, p);
    }
}

#[test]
fn level_start_index_oracle() {
    let shapes = parse_shape_list("80x80,40x40,20x20").unwrap();
    assert_eq!(level_start_index(&shapes), vec![0, 6400, 8000]);
    assert_eq!(shapes[1], SpatialShape::new(40, 40));
}

#[test]
fn mismatched_levels_are_rejected() {
    let mut r = rng(0);
    let levels = vec![
        random(&mut r, &[1, 2, 3, 3], 0.0, 1.0),
        random(&mut r, &[1, 3, 2, 2], 0.0, 1.0),
    ];
    assert!(FeaturePyramid::from_arrays(levels).is_err());
    let p = build(1, 1, 2, &[(2, 2)]);
    let flat = flatten_pyramid(&p);
    assert!(unflatten_pyramid(&flat.values, &[SpatialShape::new(3, 3)]).is_err());
}

#[test]
fn fixture_file_round_trip_and_corruption() {
    let dir = tempfile_dir();
    let path = dir.join("pyr.fixture");
    let p = build(7, 2, 3, &[(4, 5), (2, 3)]);
    pyramid_to_fixture(&p, Precision::F64).save(&path).unwrap();
    assert_eq!(
        pyramid_from_fixture(&Fixture::load(&path).unwrap()).unwrap(),
        p
    );

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 8);
    assert!(Fixture::read_from(bytes.as_slice()).is_err());
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn f32_fixture_rounds_to_single_precision() {
    let p = build(3, 1, 1, &[(2, 2)]);
    let mut bytes = Vec::new();
    pyramid_to_fixture(&p, Precision::F32)
        .write_to(&mut bytes)
        .unwrap();
    let back = pyramid_from_fixture(&Fixture::read_from(bytes.as_slice()).unwrap()).unwrap();
    for (a, b) in back.levels()[0]
        .values()
        .data()
        .iter()
        .zip(p.levels()[0].values().data())
    {
        assert_eq!(*a, *b as f32 as f64);
    }
}

fn tempfile_dir() -> std::path::PathBuf {
    let dir = std::env::temp_dir().join(format!("msdeform-test-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
