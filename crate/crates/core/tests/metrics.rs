mod common;

use common::two_plane;
use falnet::falnet::{FalNet, NetworkConfig};
use falnet::medvol::{disparity_from_volume, View};
use falnet::metrics::{
    evaluate, evaluate_disparities, postprocess, predict_disparity, psnr, PostProcess, Scaling,
};
use falnet::quantize::{make_levels, QuantMode};
use falnet::scenes::render;
use gradcore::kernels::flip_w;
use gradcore::Tensor;
use proptest::prelude::*;

/// Straight transcription of the metric definitions, pixel by pixel.
fn oracle(p: &[f64], g: &[f64]) -> [f64; 7] {
    let n = g.len() as f64;
    let mean =
        |f: &dyn Fn(f64, f64) -> f64| p.iter().zip(g).map(|(&p, &g)| f(p, g)).sum::<f64>() / n;
    let within = |t: f64| mean(&|p, g| if (p / g).max(g / p) < t { 1.0 } else { 0.0 });
    [
        mean(&|p, g| (p - g).abs() / g),
        mean(&|p, g| (p - g).powi(2) / g),
        mean(&|p, g| (p - g).powi(2)).sqrt(),
        mean(&|p, g| (p.ln() - g.ln()).powi(2)).sqrt(),
        within(1.25),
        within(1.25 * 1.25),
        within(1.25 * 1.25 * 1.25),
    ]
}

fn as_array(r: &falnet::metrics::EvalReport) -> [f64; 7] {
    [r.abs_rel, r.sq_rel, r.rmse, r.rmse_log, r.a1, r.a2, r.a3]
}

#[test]
fn four_pixel_example() {
    let gt = [10.0, 20.0, 40.0, 80.0];
    let pred = [11.0, 18.0, 50.0, 80.0];
    let r = evaluate(&pred, &gt, None, 80.0, Scaling::None).unwrap();
    assert!((r.abs_rel - 0.1125).abs() < 1e-15, "{}", r.abs_rel);
    assert!((r.sq_rel - 0.7).abs() < 1e-15);
    assert!((r.rmse - 26.25f64.sqrt()).abs() < 1e-12);
    // 50/40 is exactly 1.25, which fails the strict `< 1.25` test
    assert_eq!((r.a1, r.a2, r.a3), (0.75, 1.0, 1.0));
    assert_eq!(r.pixels, 4);
    for (a, b) in as_array(&r).iter().zip(oracle(&pred, &gt)) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn identity_is_perfect() {
    let gt: Vec<f64> = (1..50).map(|i| i as f64 * 1.5).collect();
    let r = evaluate(&gt, &gt, None, 80.0, Scaling::None).unwrap();
    assert_eq!(as_array(&r), [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
}

#[test]
fn median_scaling_cancels_a_global_factor() {
    let gt: Vec<f64> = (1..40).map(|i| 2.0 + i as f64 * 1.7).collect();
    for s in [0.5, 1.0, 2.0] {
        let pred: Vec<f64> = gt.iter().map(|g| g * s).collect();
        let scaled = evaluate(&pred, &gt, None, 80.0, Scaling::Median).unwrap();
        for m in &as_array(&scaled)[..4] {
            assert!(m.abs() < 1e-12, "s={s}: {scaled:?}");
        }
        assert_eq!((scaled.a1, scaled.a2, scaled.a3), (1.0, 1.0, 1.0));
        let plain = evaluate(&pred, &gt, None, 80.0, Scaling::None).unwrap();
        assert!(scaled.abs_rel <= plain.abs_rel);
    }
}

#[test]
fn cap_and_mask_select_pixels() {
    let gt = [10.0, 90.0, 0.0, 30.0];
    let pred = [12.0, 50.0, 3.0, 30.0];
    let r = evaluate(
        &pred,
        &gt,
        Some(&[true, true, true, false]),
        80.0,
        Scaling::None,
    )
    .unwrap();
    assert_eq!(r.pixels, 1);
    assert!((r.abs_rel - 0.2).abs() < 1e-15);
    assert!(evaluate(&pred, &gt, Some(&[false; 4]), 80.0, Scaling::None).is_err());
    assert!(evaluate(&pred[..3], &gt, None, 80.0, Scaling::None).is_err());
    // predictions are clamped into (cap/1000, cap]
    let r = evaluate(&[500.0], &[40.0], None, 80.0, Scaling::None).unwrap();
    assert!((r.abs_rel - 1.0).abs() < 1e-15);
}

#[test]
fn psnr_examples() {
    let a = Tensor::full(vec![1, 3, 2, 2], 0.5f32);
    let b = a.map(|v| v + 0.1);
    assert_eq!(psnr(&a, &a, None).unwrap(), f64::INFINITY);
    assert!((psnr(&a, &b, None).unwrap() - 20.0).abs() < 1e-5);
    assert!(psnr(&a, &b, Some(&[false; 4])).is_err());
}

fn toy(levels: usize) -> FalNet<f32> {
    FalNet::new(NetworkConfig::toy(levels), 21).unwrap()
}

#[test]
fn no_post_processing_is_the_plain_forward_pass() {
    let levels = make_levels(9, 1.0, 16.0, QuantMode::Exponential).unwrap();
    let net = toy(9);
    let s = render(&two_plane(16, 48, 2.0, 6.0, 12, 30, 4)).unwrap();
    let plain = postprocess(&net, &levels, &s.left, PostProcess::None).unwrap();
    let vol = net.volume(&s.left, &levels, View::Left).unwrap();
    assert_eq!(plain.data(), disparity_from_volume(&vol).unwrap().data());
    assert_eq!(
        plain.data(),
        predict_disparity(&net, &levels, &s.left).unwrap().data()
    );
}

#[test]
fn flip_post_processing_of_a_symmetric_image_is_the_direct_prediction() {
    let levels = make_levels(9, 1.0, 16.0, QuantMode::Exponential).unwrap();
    let net = toy(9);
    let s = render(&two_plane(16, 48, 2.0, 6.0, 12, 30, 4)).unwrap();
    let sym = Tensor::from_fn(vec![1, 3, 16, 48], |k| {
        let (c, y, x) = (k / (16 * 48), k / 48 % 16, k % 48);
        s.left.at4(0, c, y, x.min(47 - x))
    });
    // the network itself is not flip-symmetric, so symmetrize its output
    let direct = predict_disparity(&net, &levels, &sym).unwrap();
    let mirrored =
        flip_w(&predict_disparity(&net, &levels, &flip_w(&sym).unwrap()).unwrap()).unwrap();
    assert_eq!(mirrored.data(), flip_w(&direct).unwrap().data());
    let pp = postprocess(&net, &levels, &sym, PostProcess::Flip).unwrap();
    let w = 48;
    for y in 0..16 {
        // where direct and mirrored agree, the blend must reproduce them
        for x in 0..w {
            if (direct.at4(0, 0, y, x) - mirrored.at4(0, 0, y, x)).abs() < 1e-6 {
                assert!((pp.at4(0, 0, y, x) - direct.at4(0, 0, y, x)).abs() < 1e-5);
            }
        }
        // left border uses the mirrored prediction, right border the direct one
        assert_eq!(pp.at4(0, 0, y, 0), mirrored.at4(0, 0, y, 0));
        assert_eq!(pp.at4(0, 0, y, w - 1), direct.at4(0, 0, y, w - 1));
    }
}

#[test]
fn multiscale_post_processing_skips_indivisible_scales() {
    let levels = make_levels(9, 1.0, 16.0, QuantMode::Exponential).unwrap();
    let net = toy(9);
    let s = render(&two_plane(32, 64, 2.0, 6.0, 12, 30, 4)).unwrap();
    let out = postprocess(&net, &levels, &s.left, PostProcess::MultiscaleFlip).unwrap();
    assert_eq!(out.shape(), &[1, 1, 32, 64]);
    assert!(out.data().iter().all(|&d| (1.0..=16.0).contains(&d)));
}

#[test]
fn ground_truth_disparities_evaluate_perfectly() {
    let s = render(&two_plane(16, 48, 2.0, 6.0, 12, 30, 4)).unwrap();
    let pred = s.disparity_left.clone().unwrap();
    let r = evaluate_disparities(&[pred], &[s], 0.5, Scaling::None).unwrap();
    // predictions pass through f32 depth conversion
    assert!(as_array(&r)[..4].iter().all(|m| m.abs() < 1e-6), "{r:?}");
    assert_eq!((r.a1, r.a2, r.a3), (1.0, 1.0, 1.0));
}

fn depths() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..60).prop_flat_map(|n| {
        (
            prop::collection::vec(0.5f64..80.0, n),
            prop::collection::vec(0.5f64..80.0, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn matches_the_definition_and_stays_ordered((p, g) in depths()) {
        let r = evaluate(&p, &g, None, 80.0, Scaling::None).unwrap();
        for (a, b) in as_array(&r).iter().zip(oracle(&p, &g)) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        prop_assert!(r.a1 <= r.a2 && r.a2 <= r.a3 && r.a3 <= 1.0);
        prop_assert!(r.abs_rel >= 0.0 && r.sq_rel >= 0.0 && r.rmse >= 0.0 && r.rmse_log >= 0.0);
    }

    #[test]
    fn pixel_order_does_not_matter((p, g) in depths(), rot in 0usize..60) {
        let k = rot % p.len();
        let (mut p2, mut g2) = (p.clone(), g.clone());
        p2.rotate_left(k);
        g2.rotate_left(k);
        p2.reverse();
        g2.reverse();
        let a = evaluate(&p, &g, None, 80.0, Scaling::Median).unwrap();
        let b = evaluate(&p2, &g2, None, 80.0, Scaling::Median).unwrap();
        for (x, y) in as_array(&a).iter().zip(as_array(&b)) {
            prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
        }
    }

    #[test]
    fn threshold_accuracy_is_symmetric((p, g) in depths()) {
        let a = evaluate(&p, &g, None, 80.0, Scaling::None).unwrap();
        let b = evaluate(&g, &p, None, 80.0, Scaling::None).unwrap();
        prop_assert_eq!((a.a1, a.a2, a.a3), (b.a1, b.a2, b.a3));
    }
}
