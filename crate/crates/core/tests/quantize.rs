use falnet::quantize::{
    depth_to_disparity, disparity_to_depth, emit_discretization_curves, make_levels, CameraModel,
    QuantMode,
};
use gradcore::Tensor;
use proptest::prelude::*;

fn golden_levels() -> Vec<f64> {
    let text = include_str!("golden/levels_exp_L49_dmin2_dmax300.txt");
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let mut parts = l.split_whitespace();
            assert_eq!(parts.next().unwrap().parse::<usize>().unwrap(), i);
            parts.next().unwrap().parse::<f64>().unwrap()
        })
        .collect()
}

#[test]
fn exponential_levels_match_high_precision_reference() {
    let golden = golden_levels();
    assert_eq!(golden.len(), 49);
    let levels = make_levels(49, 2.0, 300.0, QuantMode::Exponential).unwrap();
    for (n, (&got, &want)) in levels.values().iter().zip(&golden).enumerate() {
        assert!(
            (got - want).abs() <= 4.0 * f64::EPSILON * want,
            "level {n}: {got} vs {want}"
        );
    }
}

#[test]
fn exponential_endpoints_and_midpoint() {
    for count in [3, 17, 33, 49] {
        let l = make_levels(count, 2.0, 300.0, QuantMode::Exponential).unwrap();
        assert_eq!(l.get(0), 2.0);
        assert_eq!(l.get(count - 1), 300.0);
        let mid = l.get((count - 1) / 2);
        assert!(
            (mid - 600f64.sqrt()).abs() < 1e-12 * 300.0,
            "L={count}: {mid}"
        );
    }
}

#[test]
fn depth_conversion_examples() {
    let cam = CameraModel::new(100.0, 80.0).unwrap();
    let z = disparity_to_depth(&Tensor::scalar(2.0f64), &cam, 1.0);
    assert_eq!(z.data(), &[50.0]);
    let cam = CameraModel::new(300.0, 80.0).unwrap();
    let z = disparity_to_depth(&Tensor::scalar(300.0f64), &cam, 1.0);
    assert_eq!(z.data(), &[1.0]);
}

#[test]
fn camera_rejects_non_positive_product() {
    assert!(CameraModel::new(0.0, 80.0).is_err());
    assert!(CameraModel::new(-1.0, 80.0).is_err());
}

struct Row {
    mode: String,
    count: usize,
    disparity: f64,
}

fn read_curves(path: &std::path::Path) -> Vec<Row> {
    let mut r = csv::Reader::from_path(path).unwrap();
    assert_eq!(
        r.headers().unwrap(),
        vec!["mode", "L", "n", "disparity", "depth"]
    );
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            Row {
                mode: rec[0].to_string(),
                count: rec[1].parse().unwrap(),
                disparity: rec[3].parse().unwrap(),
            }
        })
        .collect()
}

#[test]
fn three_level_curve_has_endpoints_and_geometric_mean() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.csv");
    let cam = CameraModel::new(389.6, 80.0).unwrap();
    emit_discretization_curves(
        &[make_levels(3, 2.0, 300.0, QuantMode::Exponential).unwrap()],
        &cam,
        &path,
    )
    .unwrap();
    let rows = read_curves(&path);
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0].disparity, 2.0);
    assert!((rows[1].disparity - 600f64.sqrt()).abs() < 1e-12);
    assert_eq!(rows[2].disparity, 300.0);
}

#[test]
fn exponential_puts_more_levels_below_the_geometric_mean() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.csv");
    let cam = CameraModel::new(389.6, 80.0).unwrap();
    let mut variants = Vec::new();
    for count in [33, 49] {
        for mode in [QuantMode::Exponential, QuantMode::Linear] {
            variants.push(make_levels(count, 2.0, 300.0, mode).unwrap());
        }
    }
    emit_discretization_curves(&variants, &cam, &path).unwrap();
    let rows = read_curves(&path);
    assert_eq!(rows.len(), 2 * (33 + 49));
    let gm = 600f64.sqrt();
    for count in [33, 49] {
        let below = |mode: &str| {
            rows.iter()
                .filter(|r| r.count == count && r.mode == mode && r.disparity < gm)
                .count()
        };
        let (e, l) = (below("exp"), below("linear"));
        assert!(e > l, "L={count}: exponential {e} vs linear {l}");
    }
    let ends = |count: usize| {
        let v: Vec<f64> = rows
            .iter()
            .filter(|r| r.count == count && r.mode == "exp")
            .map(|r| r.disparity)
            .collect();
        (v[0], v[v.len() - 1])
    };
    assert_eq!(ends(33), ends(49));
}

#[test]
fn unwritable_curve_path_is_an_error() {
    let cam = CameraModel::new(1.0, 80.0).unwrap();
    let l = make_levels(3, 1.0, 2.0, QuantMode::Linear).unwrap();
    assert!(
        emit_discretization_curves(&[l], &cam, std::path::Path::new("/nonexistent/dir/c.csv"))
            .is_err()
    );
}

fn range() -> impl Strategy<Value = (usize, f64, f64)> {
    (2usize..80, 0.1f64..10.0, 1.01f64..100.0).prop_map(|(n, lo, ratio)| (n, lo, lo * ratio))
}

proptest! {
    #[test]
    fn exponential_ratio_is_constant((count, lo, hi) in range()) {
        let l = make_levels(count, lo, hi, QuantMode::Exponential).unwrap();
        let v = l.values();
        let r0 = v[1] / v[0];
        for w in v.windows(2) {
            prop_assert!((w[1] / w[0] - r0).abs() < 1e-9);
        }
        prop_assert_eq!(v[0], lo);
        prop_assert_eq!(v[count - 1], hi);
    }

    #[test]
    fn linear_step_is_constant((count, lo, hi) in range()) {
        let l = make_levels(count, lo, hi, QuantMode::Linear).unwrap();
        let v = l.values();
        let s0 = v[1] - v[0];
        for w in v.windows(2) {
            prop_assert!((w[1] - w[0] - s0).abs() < 1e-9 * hi);
        }
        prop_assert!((v[count - 1] - hi).abs() < 1e-12 * hi);
    }

    #[test]
    fn exponential_lies_below_linear((count, lo, hi) in range()) {
        let e = make_levels(count, lo, hi, QuantMode::Exponential).unwrap();
        let l = make_levels(count, lo, hi, QuantMode::Linear).unwrap();
        prop_assert_eq!(e.get(0), l.get(0));
        for n in 1..count - 1 {
            prop_assert!(e.get(n) <= l.get(n) + 1e-12 * hi);
        }
        prop_assert!(e.values().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn depth_disparity_round_trip(bf in 1.0f64..1000.0, frac in 0.001f64..0.999) {
        let cam = CameraModel::new(bf, 80.0).unwrap();
        let z = 80.0 * frac;
        let d = depth_to_disparity(&Tensor::scalar(z), &cam);
        let back = disparity_to_depth(&d, &cam, 1e-12);
        prop_assert!((back.data()[0] - z).abs() < 1e-6 * z.max(1.0));
    }
}
