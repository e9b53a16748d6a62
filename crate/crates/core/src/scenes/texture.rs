use serde::{Deserialize, Serialize};

/// Procedural layer textures, evaluated in layer coordinates `(u, v)`.
/// Every variant blends between a `low` and a `high` colour.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Texture {
    Flat {
        color: [f32; 3],
    },
    /// Smooth lattice value noise with `octaves` halving cell sizes.
    Noise {
        seed: u64,
        cell: f64,
        octaves: u32,
        low: [f32; 3],
        high: [f32; 3],
    },
    Checker {
        period: f64,
        low: [f32; 3],
        high: [f32; 3],
    },
    /// Triangle-wave ramp along `u`.
    Gradient {
        period: f64,
        low: [f32; 3],
        high: [f32; 3],
    },
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice(seed: u64, i: i64, j: i64) -> f64 {
    let h = splitmix(seed ^ splitmix(i as u64 ^ splitmix(j as u64).rotate_left(17)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise(seed: u64, u: f64, v: f64) -> f64 {
    let (fi, fj) = (u.floor(), v.floor());
    let (i, j) = (fi as i64, fj as i64);
    let (tx, ty) = (smooth(u - fi), smooth(v - fj));
    let a = lattice(seed, i, j);
    let b = lattice(seed, i + 1, j);
    let c = lattice(seed, i, j + 1);
    let d = lattice(seed, i + 1, j + 1);
    let top = a + (b - a) * tx;
    let bottom = c + (d - c) * tx;
    top + (bottom - top) * ty
}

fn mix(low: [f32; 3], high: [f32; 3], t: f64) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0);
    let mut out = [0f32; 3];
    for c in 0..3 {
        out[c] = (low[c] as f64 + (high[c] as f64 - low[c] as f64) * t) as f32;
    }
    out
}

impl Texture {
    pub(crate) fn validate(&self) -> Result<(), String> {
        let colors: Vec<&[f32; 3]> = match self {
            Texture::Flat { color } => vec![color],
            Texture::Noise {
                cell,
                octaves,
                low,
                high,
                ..
            } => {
                if !(*cell > 0.0) || *octaves == 0 {
                    return Err("noise needs cell > 0 and at least one octave".into());
                }
                vec![low, high]
            }
            Texture::Checker { period, low, high } | Texture::Gradient { period, low, high } => {
                if !(*period > 0.0) {
                    return Err("period must be positive".into());
                }
                vec![low, high]
            }
        };
        if colors
            .iter()
            .flat_map(|c| c.iter())
            .any(|v| !(0.0..=1.0).contains(v))
        {
            return Err("colours must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn sample(&self, u: f64, v: f64) -> [f32; 3] {
        match *self {
            Texture::Flat { color } => color,
            Texture::Noise {
                seed,
                cell,
                octaves,
                low,
                high,
            } => {
                let (mut acc, mut norm, mut amp, mut scale) = (0.0, 0.0, 1.0, 1.0 / cell);
                for o in 0..octaves {
                    acc += amp * value_noise(seed.wrapping_add(o as u64), u * scale, v * scale);
                    norm += amp;
                    amp *= 0.5;
                    scale *= 2.0;
                }
                mix(low, high, acc / norm)
            }
            Texture::Checker { period, low, high } => {
                let k = (u / period).floor() as i64 + (v / period).floor() as i64;
                mix(low, high, k.rem_euclid(2) as f64)
            }
            Texture::Gradient { period, low, high } => {
                let p = (u / period).rem_euclid(2.0);
                mix(low, high, if p < 1.0 { p } else { 2.0 - p })
            }
        }
    }
}
