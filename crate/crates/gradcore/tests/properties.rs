use gradcore::kernels::{flip_w, grad_x, grad_y, softmax_channels};
use gradcore::{Tape, Tensor};
use proptest::prelude::*;

fn tensor(shape: [usize; 4]) -> impl Strategy<Value = Tensor<f64>> {
    let n = shape.iter().product::<usize>();
    prop::collection::vec(-10.0f64..10.0, n)
        .prop_map(move |d| Tensor::new(shape.to_vec(), d).unwrap())
}

fn dims() -> impl Strategy<Value = [usize; 4]> {
    (1usize..3, 1usize..4, 1usize..6, 1usize..7).prop_map(|(b, c, h, w)| [b, c, h, w])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flip_twice_is_identity(x in dims().prop_flat_map(tensor)) {
        let back = flip_w(&flip_w(&x).unwrap()).unwrap();
        prop_assert_eq!(back.data(), x.data());
    }

    #[test]
    fn softmax_is_a_distribution(x in dims().prop_flat_map(tensor)) {
        let p = softmax_channels(&x).unwrap();
        let [b, c, h, w] = p.dims4().unwrap();
        for bi in 0..b {
            for y in 0..h {
                for xi in 0..w {
                    let s: f64 = (0..c).map(|ci| p.at4(bi, ci, y, xi)).sum();
                    prop_assert!((s - 1.0).abs() < 1e-12);
                    for ci in 0..c {
                        prop_assert!(p.at4(bi, ci, y, xi) > 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn softmax_ignores_a_shared_offset(x in dims().prop_flat_map(tensor), k in -50.0f64..50.0) {
        let a = softmax_channels(&x).unwrap();
        let b = softmax_channels(&x.map(|v| v + k)).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn spatial_differences_drop_one_row_or_column(x in dims().prop_flat_map(tensor)) {
        let [b, c, h, w] = x.dims4().unwrap();
        if w >= 2 {
            let g = grad_x(&x).unwrap();
            prop_assert_eq!(g.shape(), &[b, c, h, w - 1]);
        }
        if h >= 2 {
            let g = grad_y(&x).unwrap();
            prop_assert_eq!(g.shape(), &[b, c, h - 1, w]);
        }
    }

    #[test]
    fn conv_output_size_follows_the_formula(
        h in 3usize..9, w in 3usize..9, k in 1usize..4, stride in 1usize..3, pad in 0usize..2,
    ) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(vec![1, 2, h, w]));
        let wt = tape.constant(Tensor::ones(vec![3, 2, k, k]));
        let y = tape.conv2d(x, wt, None, stride, pad).unwrap();
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        prop_assert_eq!(tape.value(y).shape(), &[1, 3, oh, ow]);
    }

    #[test]
    fn gradient_of_a_sum_reaching_a_leaf_twice_doubles(x in dims().prop_flat_map(tensor)) {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let s = tape.add(v, v).unwrap();
        let out = tape.sum(s);
        let g = tape.backward(out).unwrap();
        prop_assert!(g.get(v).unwrap().data().iter().all(|&d| d == 2.0));
    }
}
