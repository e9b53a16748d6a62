use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LayerSpec, Rect, SceneSpec, Texture};
use crate::error::{invalid, Result};
use crate::quantize::CameraModel;

/// Seeded recipe for random layered scenes: one full-frame background plus
/// rectangles in front of it.
///
/// Textures carry depth cues a single image can reveal: the noise cell size
/// grows with disparity and far layers are blended toward a haze colour.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneGenerator {
    pub height: usize,
    pub width: usize,
    pub camera: CameraModel,
    /// Inclusive range for the number of foreground rectangles.
    pub foreground_count: [usize; 2],
    pub background_disparity: [f64; 2],
    pub foreground_disparity: [f64; 2],
    /// Draw disparities from this list (filtered by the ranges above)
    /// instead of uniformly.
    #[serde(default)]
    pub disparity_choices: Option<Vec<f64>>,
    /// Round sampled disparities to whole pixels.
    pub integer_disparity: bool,
    /// Inclusive range for rectangle width and height as frame fractions.
    pub size_fraction: [f64; 2],
    /// Noise cell size per pixel of disparity.
    pub cell_per_disparity: f64,
    /// Blend toward the haze colour, from 0 at the nearest possible
    /// disparity up to this fraction at the farthest.
    pub haze: f64,
}

const HAZE_COLOR: [f32; 3] = [0.62, 0.66, 0.72];

impl SceneGenerator {
    /// Background at 1, 2 or 4 px and one foreground rectangle at 8 or
    /// 16 px; every disparity is a power of two.
    pub fn two_layer(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            camera: CameraModel {
                baseline_times_focal: 100.0,
                depth_cap: 80.0,
            },
            foreground_count: [1, 1],
            background_disparity: [1.0, 4.0],
            foreground_disparity: [8.0, 16.0],
            disparity_choices: Some(vec![1.0, 2.0, 4.0, 8.0, 16.0]),
            integer_disparity: true,
            size_fraction: [0.25, 0.5],
            cell_per_disparity: 1.5,
            haze: 0.5,
        }
    }

    /// Desk-scale training scenes: a far background and two to four large
    /// nearer rectangles spread over a wide disparity range.
    pub fn desk(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            camera: CameraModel {
                baseline_times_focal: 0.75 * width as f64,
                depth_cap: 80.0,
            },
            foreground_count: [2, 4],
            background_disparity: [1.5, 4.0],
            foreground_disparity: [5.0, 24.0],
            disparity_choices: None,
            integer_disparity: true,
            size_fraction: [0.35, 0.6],
            cell_per_disparity: 1.5,
            haze: 0.6,
        }
    }

    fn validate(&self) -> Result<()> {
        let op = "SceneGenerator";
        let [lo, hi] = self.foreground_count;
        if lo > hi {
            return Err(invalid(
                op,
                "foreground_count must be [min, max] with min <= max",
            ));
        }
        for (name, [a, b]) in [
            ("background_disparity", self.background_disparity),
            ("foreground_disparity", self.foreground_disparity),
            ("size_fraction", self.size_fraction),
        ] {
            if !(a > 0.0 && a <= b) {
                return Err(invalid(
                    op,
                    format!("{name} must be [min, max] with 0 < min <= max"),
                ));
            }
        }
        if self.size_fraction[1] > 1.0 {
            return Err(invalid(op, "size_fraction must not exceed 1"));
        }
        if self.background_disparity[1] >= self.foreground_disparity[0] {
            return Err(invalid(
                op,
                "foreground disparities must exceed background disparities",
            ));
        }
        Ok(())
    }

    fn disparity(&self, range: [f64; 2], rng: &mut ChaCha8Rng) -> Result<f64> {
        let d = match &self.disparity_choices {
            Some(choices) => {
                let pool: Vec<f64> = choices
                    .iter()
                    .copied()
                    .filter(|d| *d >= range[0] && *d <= range[1])
                    .collect();
                *pool.choose(rng).ok_or_else(|| {
                    invalid(
                        "SceneGenerator",
                        format!("no disparity choice within {range:?}"),
                    )
                })?
            }
            None => rng.gen_range(range[0]..=range[1]),
        };
        Ok(if self.integer_disparity {
            d.round().max(1.0)
        } else {
            d
        })
    }

    fn texture(&self, d: f64, rng: &mut ChaCha8Rng) -> Texture {
        let near = self.foreground_disparity[1];
        let far = self.background_disparity[0];
        let farness = ((near - d) / (near - far).max(1e-9)).clamp(0.0, 1.0);
        let haze = self.haze * farness;
        let mut color = || {
            let mut c = [0f32; 3];
            for (v, &h) in c.iter_mut().zip(&HAZE_COLOR) {
                let raw = rng.gen_range(0.05..0.95);
                *v = (raw * (1.0 - haze) + h as f64 * haze) as f32;
            }
            c
        };
        let (low, high) = (color(), color());
        Texture::Noise {
            // 63 bits so scene specs stay representable in TOML
            seed: rng.gen::<u64>() >> 1,
            cell: self.cell_per_disparity * d * rng.gen_range(0.8..1.25),
            octaves: 2,
            low,
            high,
        }
    }

    pub fn generate(&self, seed: u64) -> Result<SceneSpec> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bg = self.disparity(self.background_disparity, &mut rng)?;
        let mut layers = vec![LayerSpec {
            rect: None,
            disparity: bg,
            texture: self.texture(bg, &mut rng),
        }];
        let count = rng.gen_range(self.foreground_count[0]..=self.foreground_count[1]);
        let mut fg: Vec<f64> = (0..count)
            .map(|_| self.disparity(self.foreground_disparity, &mut rng))
            .collect::<Result<_>>()?;
        fg.sort_by(f64::total_cmp);
        fg.dedup();
        for d in fg {
            if d <= bg {
                continue;
            }
            let margin = d.ceil() as i64;
            let (w, h) = (self.width as i64, self.height as i64);
            let rw = ((rng.gen_range(self.size_fraction[0]..=self.size_fraction[1]) * w as f64)
                as i64)
                .max(1);
            let rh = ((rng.gen_range(self.size_fraction[0]..=self.size_fraction[1]) * h as f64)
                as i64)
                .max(1);
            let x_hi = w - margin - rw;
            if x_hi < margin || rh > h {
                continue;
            }
            let x0 = rng.gen_range(margin..=x_hi);
            let y0 = rng.gen_range(0..=h - rh);
            let texture = self.texture(d, &mut rng);
            layers.push(LayerSpec {
                rect: Some(Rect {
                    x0,
                    y0,
                    x1: x0 + rw,
                    y1: y0 + rh,
                }),
                disparity: d,
                texture,
            });
        }
        let spec = SceneSpec {
            seed,
            height: self.height,
            width: self.width,
            layers,
            camera: self.camera,
        };
        spec.validate(None)?;
        Ok(spec)
    }
}
