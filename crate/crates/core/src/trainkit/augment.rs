use gradcore::kernels::{flip_w, resize_bilinear};
use gradcore::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::scenes::StereoSample;

/// Sampling ranges for on-the-fly augmentation. Each `[lo, hi]` pair is
/// sampled uniformly; `lo == hi` disables that jitter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Resize factor applied before cropping.
    pub scale: [f64; 2],
    /// `[height, width]` of the crop.
    pub crop: [usize; 2],
    pub flip_probability: f64,
    pub gamma: [f64; 2],
    pub brightness: [f64; 2],
    /// Per-channel multiplier.
    pub color: [f64; 2],
}

impl AugmentConfig {
    pub fn reference() -> Self {
        Self {
            scale: [0.75, 1.5],
            crop: [192, 640],
            flip_probability: 0.5,
            gamma: [0.8, 1.2],
            brightness: [0.8, 1.2],
            color: [0.95, 1.05],
        }
    }

    /// Crop only.
    pub fn identity(crop: [usize; 2]) -> Self {
        Self {
            scale: [1.0, 1.0],
            crop,
            flip_probability: 0.0,
            gamma: [1.0, 1.0],
            brightness: [1.0, 1.0],
            color: [1.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let op = "AugmentConfig";
        for (name, [lo, hi]) in [
            ("scale", self.scale),
            ("gamma", self.gamma),
            ("brightness", self.brightness),
            ("color", self.color),
        ] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(invalid(
                    op,
                    format!("{name} must be [lo, hi] with 0 < lo <= hi, got [{lo}, {hi}]"),
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(invalid(op, "flip_probability must lie in [0, 1]"));
        }
        if self.crop.contains(&0) {
            return Err(invalid(op, "crop size must be positive"));
        }
        Ok(())
    }
}

fn draw<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Nearest-neighbour resize with half-pixel centres.
fn resize_nearest(x: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>> {
    let [b, c, h, w] = x.dims4()?;
    let pick = |i: usize, src: usize, dst: usize| {
        (((i as f64 + 0.5) * src as f64 / dst as f64) as usize).min(src - 1)
    };
    let rows: Vec<usize> = (0..out_h).map(|y| pick(y, h, out_h)).collect();
    let cols: Vec<usize> = (0..out_w).map(|x| pick(x, w, out_w)).collect();
    let mut out = Vec::with_capacity(b * c * out_h * out_w);
    for plane in x.data().chunks(h * w) {
        for &sy in &rows {
            out.extend(cols.iter().map(|&sx| plane[sy * w + sx]));
        }
    }
    Ok(Tensor::new(vec![b, c, out_h, out_w], out)?)
}

fn crop(x: &Tensor<f32>, y0: usize, x0: usize, ch: usize, cw: usize) -> Result<Tensor<f32>> {
    let [b, c, h, w] = x.dims4()?;
    let mut out = Vec::with_capacity(b * c * ch * cw);
    for plane in x.data().chunks(h * w) {
        for y in y0..y0 + ch {
            out.extend_from_slice(&plane[y * w + x0..y * w + x0 + cw]);
        }
    }
    Ok(Tensor::new(vec![b, c, ch, cw], out)?)
}

fn map_opt(
    t: &Option<Tensor<f32>>,
    f: impl Fn(&Tensor<f32>) -> Result<Tensor<f32>>,
) -> Result<Option<Tensor<f32>>> {
    t.as_ref().map(f).transpose()
}

/// Swap the views and mirror everything, which keeps the pair rectified:
/// the mirrored right image becomes the new left image.
pub fn flip_pair(s: &StereoSample) -> Result<StereoSample> {
    Ok(StereoSample {
        left: flip_w(&s.right)?,
        right: flip_w(&s.left)?,
        disparity_left: map_opt(&s.disparity_right, |t| Ok(flip_w(t)?))?,
        disparity_right: map_opt(&s.disparity_left, |t| Ok(flip_w(t)?))?,
        visible_left: map_opt(&s.visible_right, |t| Ok(flip_w(t)?))?,
        visible_right: map_opt(&s.visible_left, |t| Ok(flip_w(t)?))?,
        camera: s.camera,
    })
}

/// Resize, crop, flip and photometric jitter, each drawn from `rng`. Both
/// views share every random choice. Disparities scale with the horizontal
/// resize factor; visibility is recomputed for the cropped geometry.
pub fn augment<R: Rng + ?Sized>(
    sample: &StereoSample,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<StereoSample> {
    cfg.validate()?;
    let (h, w) = (sample.height(), sample.width());
    let s = draw(rng, cfg.scale);
    let (rh, rw) = if s == 1.0 {
        (h, w)
    } else {
        (
            (h as f64 * s).round() as usize,
            (w as f64 * s).round() as usize,
        )
    };
    let [ch, cw] = cfg.crop;
    if ch > rh || cw > rw {
        return Err(invalid(
            "augment",
            format!("crop {ch}x{cw} is larger than the resized image {rh}x{rw} (scale {s:.3})"),
        ));
    }
    let y0 = rng.gen_range(0..=rh - ch);
    let x0 = rng.gen_range(0..=rw - cw);
    let flip = cfg.flip_probability > 0.0 && rng.gen_bool(cfg.flip_probability);
    let gamma = draw(rng, cfg.gamma) as f32;
    let bright = draw(rng, cfg.brightness) as f32;
    let color: Vec<f32> = (0..3).map(|_| draw(rng, cfg.color) as f32).collect();

    let factor = rw as f32 / w as f32;
    let image = |t: &Tensor<f32>| -> Result<Tensor<f32>> {
        let t = if (rh, rw) == (h, w) {
            t.clone()
        } else {
            resize_bilinear(t, rh, rw)?
        };
        crop(&t, y0, x0, ch, cw)
    };
    let disparity = |t: &Tensor<f32>| -> Result<Tensor<f32>> {
        let t = if (rh, rw) == (h, w) {
            t.clone()
        } else {
            resize_nearest(t, rh, rw)?.map(|d| d * factor)
        };
        crop(&t, y0, x0, ch, cw)
    };
    let mut out = StereoSample {
        left: image(&sample.left)?,
        right: image(&sample.right)?,
        disparity_left: map_opt(&sample.disparity_left, disparity)?,
        disparity_right: map_opt(&sample.disparity_right, disparity)?,
        visible_left: None,
        visible_right: None,
        camera: sample.camera,
    };
    if flip {
        out = flip_pair(&out)?;
    }
    let identity = gamma == 1.0 && bright == 1.0 && color.iter().all(|&c| c == 1.0);
    if !identity {
        for img in [&mut out.left, &mut out.right] {
            let plane = ch * cw;
            for (i, v) in img.data_mut().iter_mut().enumerate() {
                let c = color[(i / plane) % 3];
                *v = (v.max(0.0).powf(gamma) * bright * c).clamp(0.0, 1.0);
            }
        }
    }
    out.compute_visibility()?;
    Ok(out)
}

/// Central `crop` window of a sample, without other changes.
pub fn center_crop(sample: &StereoSample, crop_hw: [usize; 2]) -> Result<StereoSample> {
    let (h, w) = (sample.height(), sample.width());
    let [ch, cw] = crop_hw;
    if ch > h || cw > w {
        return Err(invalid(
            "center_crop",
            format!("crop {ch}x{cw} is larger than the image {h}x{w}"),
        ));
    }
    if (ch, cw) == (h, w) {
        return Ok(sample.clone());
    }
    let (y0, x0) = ((h - ch) / 2, (w - cw) / 2);
    let c = |t: &Tensor<f32>| crop(t, y0, x0, ch, cw);
    let mut out = StereoSample {
        left: c(&sample.left)?,
        right: c(&sample.right)?,
        disparity_left: map_opt(&sample.disparity_left, c)?,
        disparity_right: map_opt(&sample.disparity_right, c)?,
        visible_left: None,
        visible_right: None,
        camera: sample.camera,
    };
    out.compute_visibility()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes::{render, SceneGenerator};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> StereoSample {
        render(&SceneGenerator::two_layer(16, 48).generate(3).unwrap()).unwrap()
    }

    #[test]
    fn identity_ranges_only_crop() {
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = augment(&s, &AugmentConfig::identity([16, 48]), &mut rng).unwrap();
        assert_eq!(a.left, s.left);
        assert_eq!(a.right, s.right);
        assert_eq!(a.disparity_left, s.disparity_left);
    }

    #[test]
    fn flip_twice_restores() {
        let s = sample();
        let back = flip_pair(&flip_pair(&s).unwrap()).unwrap();
        assert_eq!(back.left, s.left);
        assert_eq!(back.right, s.right);
        assert_eq!(back.disparity_right, s.disparity_right);
        assert_eq!(back.visible_left, s.visible_left);
    }

    #[test]
    fn resize_scales_disparity() {
        let s = sample();
        let mut cfg = AugmentConfig::identity([24, 72]);
        cfg.scale = [1.5, 1.5];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = augment(&s, &cfg, &mut rng).unwrap();
        let orig: Vec<f32> = s.disparity_left.unwrap().data().to_vec();
        let scaled = a.disparity_left.unwrap();
        let mut originals: Vec<f32> = orig.iter().map(|d| d * 1.5).collect();
        originals.sort_by(f32::total_cmp);
        originals.dedup();
        for d in scaled.data() {
            assert!(
                originals.contains(d),
                "{d} is not 1.5x an original disparity"
            );
        }
    }

    #[test]
    fn oversized_crop_is_rejected() {
        let s = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = augment(&s, &AugmentConfig::identity([32, 48]), &mut rng).unwrap_err();
        assert!(err.to_string().contains("larger than the resized image"));
    }
}
