use gradcore::{check_gradients, GradCheckOptions, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 20;
const TOL: f64 = 1e-4;

/// Uniform in ±[lo, hi]: keeps samples away from kinks at zero.
fn away_from_zero(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(lo..hi);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::rand_uniform(shape.to_vec(), lo, hi, rng)
}

fn check_op<M, G>(name: &str, make_inputs: M, build: G)
where
    M: Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    G: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut worst = 0.0f64;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let inputs = make_inputs(&mut rng);
        let opts = GradCheckOptions {
            seed,
            ..Default::default()
        };
        let report = check_gradients(&inputs, &build, &opts).unwrap();
        assert!(report.checked > 0);
        assert!(
            report.max_rel_error < TOL,
            "{name} seed {seed}: rel error {} at {:?}",
            report.max_rel_error,
            report.worst
        );
        worst = worst.max(report.max_rel_error);
    }
    println!("{name}: max rel error {worst:.3e}");
}

const IMG: [usize; 4] = [1, 2, 6, 7];

#[test]
fn conv2d_matches_finite_differences() {
    for &(stride, padding) in &[(1usize, 0usize), (1, 1), (2, 1)] {
        check_op(
            &format!("conv2d s{stride} p{padding}"),
            |r| {
                vec![
                    uniform(&[1, 2, 5, 5], -1.0, 1.0, r),
                    uniform(&[3, 2, 3, 3], -1.0, 1.0, r),
                    uniform(&[3], -1.0, 1.0, r),
                ]
            },
            move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, padding),
        );
    }
}

#[test]
fn pointwise_conv_matches_finite_differences() {
    check_op(
        "conv2d 1x1",
        |r| {
            vec![
                uniform(&IMG, -1.0, 1.0, r),
                uniform(&[4, 2, 1, 1], -1.0, 1.0, r),
            ]
        },
        |t, v| t.conv2d(v[0], v[1], None, 1, 0),
    );
}

#[test]
fn softmax_matches_finite_differences() {
    check_op(
        "softmax_channels",
        |r| vec![uniform(&[1, 5, 4, 4], -3.0, 3.0, r)],
        |t, v| t.softmax_channels(v[0]),
    );
}

#[test]
fn softmax_channels_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = uniform(&[1, 5, 4, 4], -5.0, 5.0, &mut rng);
    let p = gradcore::kernels::softmax_channels(&x).unwrap();
    let s = gradcore::kernels::sum_channels(&p).unwrap();
    for &v in s.data() {
        assert!((v - 1.0).abs() < 1e-6);
    }
    assert!(p.data().iter().all(|&v| v > 0.0));
}

#[test]
fn binary_elementwise_ops_match_finite_differences() {
    let two = |r: &mut ChaCha8Rng| vec![uniform(&IMG, -1.0, 1.0, r), uniform(&IMG, -1.0, 1.0, r)];
    check_op("add", two, |t, v| t.add(v[0], v[1]));
    check_op("sub", two, |t, v| t.sub(v[0], v[1]));
    check_op("mul", two, |t, v| t.mul(v[0], v[1]));
    check_op(
        "div",
        |r| {
            vec![
                uniform(&IMG, -1.0, 1.0, r),
                away_from_zero(&IMG, 0.5, 2.0, r),
            ]
        },
        |t, v| t.div(v[0], v[1]),
    );
}

#[test]
fn unary_ops_match_finite_differences() {
    let signed = |r: &mut ChaCha8Rng| vec![away_from_zero(&IMG, 0.05, 2.0, r)];
    check_op("add_scalar", signed, |t, v| Ok(t.add_scalar(v[0], 0.7)));
    check_op("mul_scalar", signed, |t, v| Ok(t.mul_scalar(v[0], -1.3)));
    check_op("relu", signed, |t, v| Ok(t.relu(v[0])));
    check_op("elu", signed, |t, v| Ok(t.elu(v[0], 1.0)));
    check_op("abs", signed, |t, v| Ok(t.abs(v[0])));
    check_op("exp", signed, |t, v| Ok(t.exp(v[0])));
    check_op(
        "log",
        |r| vec![uniform(&IMG, 0.2, 3.0, r)],
        |t, v| Ok(t.log(v[0])),
    );
    check_op(
        "max_scalar",
        |r| {
            // keep samples at least 0.05 from the threshold 0.3
            let mut x = away_from_zero(&IMG, 0.05, 1.0, r);
            x.data_mut().iter_mut().for_each(|v| *v += 0.3);
            vec![x]
        },
        |t, v| Ok(t.max_scalar(v[0], 0.3)),
    );
    check_op(
        "clamp",
        |r| {
            let x = Tensor::from_fn(IMG.to_vec(), |_| {
                let choices = [-1.0, -0.3, 0.2, 0.7, 1.4];
                choices[r.gen_range(0..choices.len())] + r.gen_range(-0.04..0.04)
            });
            vec![x]
        },
        |t, v| Ok(t.clamp(v[0], 0.0, 1.0)),
    );
}

#[test]
fn reductions_match_finite_differences() {
    let one = |r: &mut ChaCha8Rng| vec![uniform(&IMG, -1.0, 1.0, r)];
    check_op("sum", one, |t, v| Ok(t.sum(v[0])));
    check_op("mean", one, |t, v| Ok(t.mean(v[0])));
    check_op("sum_channels", one, |t, v| t.sum_channels(v[0]));
    check_op("mean_channels", one, |t, v| t.mean_channels(v[0]));
    check_op("scale_channels", one, |t, v| {
        t.scale_channels(v[0], &[0.5, -2.0])
    });
    check_op(
        "broadcast_channels",
        |r| vec![uniform(&[1, 1, 6, 7], -1.0, 1.0, r)],
        |t, v| t.broadcast_channels(v[0], 3),
    );
}

#[test]
fn spatial_ops_match_finite_differences() {
    let one = |r: &mut ChaCha8Rng| vec![uniform(&IMG, -1.0, 1.0, r)];
    check_op("grad_x", one, |t, v| t.grad_x(v[0]));
    check_op("grad_y", one, |t, v| t.grad_y(v[0]));
    check_op("upsample_nearest2x", one, |t, v| t.upsample_nearest2x(v[0]));
    check_op("upsample_bilinear2x", one, |t, v| {
        t.upsample_bilinear2x(v[0])
    });
    check_op("upsample_zeros2x", one, |t, v| t.upsample_zeros2x(v[0]));
    check_op("flip_w", one, |t, v| t.flip_w(v[0]));
    check_op(
        "concat_channels",
        |r| {
            vec![
                uniform(&IMG, -1.0, 1.0, r),
                uniform(&[1, 3, 6, 7], -1.0, 1.0, r),
            ]
        },
        |t, v| t.concat_channels(&[v[0], v[1]]),
    );
}

#[test]
fn composite_graph_matches_finite_differences() {
    // conv -> elu -> upsample -> concat with a skip -> softmax -> weighted sum
    check_op(
        "composite",
        |r| {
            vec![
                uniform(&[2, 2, 4, 6], -1.0, 1.0, r),
                uniform(&[3, 2, 3, 3], -0.5, 0.5, r),
                uniform(&[3], -0.1, 0.1, r),
            ]
        },
        |t, v| {
            let h = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            let h = t.elu(h, 1.0);
            let up = t.upsample_nearest2x(h)?;
            let cat = t.concat_channels(&[up, v[0]])?;
            let p = t.softmax_channels(cat)?;
            let w = t.scale_channels(p, &[1.0, 2.0, 3.0, 4.0, 5.0])?;
            t.sum_channels(w)
        },
    );
}

#[test]
fn forward_and_backward_are_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::rand_uniform(vec![2, 3, 8, 8], -1.0, 1.0, &mut rng));
        let w = t.leaf(Tensor::rand_uniform(vec![4, 3, 3, 3], -1.0, 1.0, &mut rng));
        let y = t.conv2d(x, w, None, 1, 1).unwrap();
        let y = t.elu(y, 1.0);
        let p = t.softmax_channels(y).unwrap();
        let s = t.mean(p);
        let s2 = t.mul(s, s).unwrap();
        let g = t.backward(s2).unwrap();
        (t.value(y).clone(), g.get(w).unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.data(), b.data());
    assert_eq!(ga.data(), gb.data());
}
