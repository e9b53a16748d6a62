#![allow(dead_code)]

use falnet::quantize::{CameraModel, DisparityLevels};
use falnet::scenes::{LayerSpec, Rect, SceneGenerator, SceneSpec, Texture};
use gradcore::Tensor;

/// Tensor filled from its `[b, c, y, x]` index.
pub fn grid(shape: [usize; 4], f: impl Fn([usize; 4]) -> f64) -> Tensor<f64> {
    let [_, c, h, w] = shape;
    Tensor::from_fn(shape.to_vec(), |k| {
        f([k / (c * h * w), k / (h * w) % c, k / w % h, k % w])
    })
}

pub fn camera() -> CameraModel {
    CameraModel::new(100.0, 80.0).unwrap()
}

pub fn noise(seed: u64, cell: f64) -> Texture {
    Texture::Noise {
        seed,
        cell,
        octaves: 2,
        low: [0.1, 0.2, 0.15],
        high: [0.9, 0.75, 0.85],
    }
}

/// A textured plane filling the frame at one disparity.
pub fn plane(h: usize, w: usize, d: f64, seed: u64) -> SceneSpec {
    SceneSpec {
        seed,
        height: h,
        width: w,
        layers: vec![LayerSpec {
            rect: None,
            disparity: d,
            texture: noise(seed, 3.0),
        }],
        camera: camera(),
    }
}

/// Background at `bg` and one rectangle spanning columns `x0..x1` at `fg`.
pub fn two_plane(h: usize, w: usize, bg: f64, fg: f64, x0: i64, x1: i64, seed: u64) -> SceneSpec {
    let mut spec = plane(h, w, bg, seed);
    spec.layers.push(LayerSpec {
        rect: Some(Rect {
            x0,
            y0: 2,
            x1,
            y1: h as i64 - 2,
        }),
        disparity: fg,
        texture: noise(seed + 1, 4.0),
    });
    spec
}

/// Levels holding every power of two the two-layer generator draws.
pub fn two_layer_levels() -> DisparityLevels {
    DisparityLevels::custom(vec![1.0, 2.0, 4.0, 8.0, 16.0]).unwrap()
}

pub fn two_layer_scenes(count: usize) -> Vec<SceneSpec> {
    let g = SceneGenerator::two_layer(32, 96);
    (0..count as u64)
        .map(|s| g.generate(1000 + s).unwrap())
        .collect()
}
