mod common;

use common::two_plane;
use falnet::checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, TrainingState, MANIFEST_FILE, PARAMS_FILE,
};
use falnet::falnet::{FalNet, NetworkConfig};
use falnet::losses::LossWeights;
use falnet::medvol::{disparity_from_volume, View};
use falnet::quantize::{make_levels, LevelConfig, QuantMode};
use falnet::scenes::render;
use falnet::trainkit::{MaskMode, Objective};
use gradcore::kernels::flip_w;
use gradcore::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_image(shape: [usize; 4], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::rand_uniform(shape.to_vec(), 0.0, 1.0, &mut rng)
}

#[test]
fn toy_network_output_shape() {
    let net = FalNet::<f32>::new(NetworkConfig::toy(9), 4).unwrap();
    let out = net.forward(&random_image([2, 3, 64, 192], 1)).unwrap();
    assert_eq!(out.shape(), &[2, 9, 64, 192]);
    assert!(out.all_finite());
}

#[test]
fn indivisible_input_is_rejected_naming_the_multiple() {
    let net = FalNet::<f32>::new(NetworkConfig::toy(9), 4).unwrap();
    assert_eq!(net.config().input_multiple(), 8);
    let err = net
        .forward(&random_image([1, 3, 60, 64], 1))
        .unwrap_err()
        .to_string();
    assert!(err.contains('8'), "{err}");
}

#[test]
fn zero_head_gives_the_mean_level_everywhere() {
    let levels = make_levels(9, 1.0, 32.0, QuantMode::Exponential).unwrap();
    let mut net = FalNet::<f64>::new(NetworkConfig::toy(9), 2).unwrap();
    net.zero_head();
    let img = random_image([1, 3, 16, 32], 3).cast::<f64>();
    assert!(net.forward(&img).unwrap().data().iter().all(|&v| v == 0.0));
    let mean = levels.values().iter().sum::<f64>() / 9.0;
    let d = disparity_from_volume(&net.volume(&img, &levels, View::Left).unwrap()).unwrap();
    assert!(d.data().iter().all(|&v| (v - mean).abs() < 1e-12));
    // warping all-zero logits and normalizing stays uniform on the interior
    let (_, cross) = net.forward_as_right(&img, &levels).unwrap();
    let [_, l, h, w] = cross.probs().dims4().unwrap();
    for y in 0..h {
        for x in 0..w - 32 {
            for n in 0..l {
                assert!((cross.probs().at4(0, n, y, x) - 1.0 / 9.0).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let img = random_image([1, 3, 16, 32], 9);
    let a = FalNet::<f32>::new(NetworkConfig::toy(5), 7)
        .unwrap()
        .forward(&img)
        .unwrap();
    let b = FalNet::<f32>::new(NetworkConfig::toy(5), 7)
        .unwrap()
        .forward(&img)
        .unwrap();
    assert_eq!(a.data(), b.data());
    let c = FalNet::<f32>::new(NetworkConfig::toy(5), 8)
        .unwrap()
        .forward(&img)
        .unwrap();
    assert_ne!(a.data(), c.data());
}

#[test]
fn right_pass_of_a_symmetric_image_is_the_flipped_left_pass() {
    let levels = make_levels(5, 1.0, 8.0, QuantMode::Exponential).unwrap();
    let net = FalNet::<f32>::new(NetworkConfig::toy(5), 7).unwrap();
    let img = random_image([1, 3, 16, 16], 5);
    let sym = Tensor::from_fn(vec![1, 3, 16, 32], |k| {
        let (c, y, x) = (k / 512, k / 32 % 16, k % 32);
        img.at4(0, c, y, x.min(31 - x))
    });
    let (right, _) = net.forward_as_right(&sym, &levels).unwrap();
    assert_eq!(
        right.data(),
        flip_w(&net.forward(&sym).unwrap()).unwrap().data()
    );
}

#[test]
fn parameter_counts_are_stable() {
    let toy = FalNet::<f32>::new(NetworkConfig::toy(17), 1).unwrap();
    let large = FalNet::<f32>::new(NetworkConfig::paperlike(49), 1).unwrap();
    assert_eq!(toy.param_count(), TOY_PARAMS);
    assert_eq!(large.param_count(), PAPERLIKE_PARAMS);
    assert!(toy.param_count() <= 1_000_000);
}

const TOY_PARAMS: usize = 172_425;
const PAPERLIKE_PARAMS: usize = 15_345_929;

#[test]
fn every_parameter_receives_gradient() {
    let levels = make_levels(9, 1.0, 16.0, QuantMode::Exponential).unwrap();
    let net = FalNet::<f32>::new(NetworkConfig::toy(9), 3).unwrap();
    let sample = render(&two_plane(16, 48, 2.0, 6.0, 12, 30, 4)).unwrap();
    let weights = LossWeights::step1();
    let objective = Objective {
        levels: &levels,
        weights: &weights,
        masks: MaskMode::Ones,
        fixed: None,
        features: None,
    };
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, true);
    let parts = objective
        .build_on(&mut tape, &net, &bound, &sample.left, &sample.right)
        .unwrap();
    let grads = tape.backward(parts.total).unwrap();
    for (p, v) in net.params().iter().zip(&bound) {
        let g = grads.get(*v).expect("gradient for every bound parameter");
        assert!(
            g.data().iter().any(|&x| x != 0.0),
            "{} has an all-zero gradient",
            p.name
        );
    }
}

fn checkpoint() -> Checkpoint {
    let levels = LevelConfig {
        count: 9,
        d_min: 1.0,
        d_max: 32.0,
        mode: QuantMode::Exponential,
    };
    Checkpoint {
        model: FalNet::new(NetworkConfig::toy(9), 5).unwrap(),
        levels,
        training: TrainingState {
            seed: 5,
            train_step: 1,
            epoch: 3,
            iteration: 120,
        },
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let ck = checkpoint();
    save_checkpoint(&ck, dir.path()).unwrap();
    let back = load_checkpoint(dir.path()).unwrap();
    assert_eq!(back.levels, ck.levels);
    assert_eq!(back.training, ck.training);
    assert_eq!(back.model.config(), ck.model.config());
    for (a, b) in ck.model.params().iter().zip(back.model.params()) {
        assert_eq!(a.name, b.name);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.value), bits(&b.value));
    }
}

#[test]
fn truncated_blob_reports_byte_counts() {
    let dir = tempfile::tempdir().unwrap();
    let ck = checkpoint();
    save_checkpoint(&ck, dir.path()).unwrap();
    let path = dir.path().join(PARAMS_FILE);
    let blob = std::fs::read(&path).unwrap();
    std::fs::write(&path, &blob[..blob.len() - 10]).unwrap();
    let err = load_checkpoint(dir.path()).unwrap_err().to_string();
    let expected = (ck.model.param_count() * 4).to_string();
    let actual = (blob.len() - 10).to_string();
    assert!(err.contains(&expected) && err.contains(&actual), "{err}");
}

#[test]
fn unknown_manifest_field_is_named() {
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&checkpoint(), dir.path()).unwrap();
    let path = dir.path().join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).unwrap();
    let text = text.replacen("[network]\n", "[network]\nwidth_multiplier = 2\n", 1);
    std::fs::write(&path, text).unwrap();
    let err = load_checkpoint(dir.path()).unwrap_err().to_string();
    assert!(err.contains("width_multiplier"), "{err}");
}
