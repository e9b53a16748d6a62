//! Layered synthetic stereo scenes with exact ground truth.
//!
//! A scene is a stack of fronto-parallel layers in left-view coordinates.
//! The bottom layer covers the whole frame; every other layer is a
//! rectangle, nearer layers having strictly larger disparity. Textures are
//! functions of layer coordinates, so the left view samples a layer at `x`
//! and the right view at `x + d`, and both views agree exactly wherever the
//! same layer is on top.

mod generator;
pub mod io;
mod texture;

use gradcore::{Real, Tape, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::medvol::{cross_volume_on, volume_from_tape, MedVolume, View};
use crate::mom::MirroredVolumes;
use crate::quantize::{CameraModel, DisparityLevels};

pub use generator::SceneGenerator;
pub use texture::Texture;

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)` in left-view coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rect {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl Rect {
    fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 as f64 && x < self.x1 as f64 && y >= self.y0 as f64 && y < self.y1 as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    /// `None` for the full-frame background.
    #[serde(default)]
    pub rect: Option<Rect>,
    pub disparity: f64,
    pub texture: Texture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Far to near.
    pub layers: Vec<LayerSpec>,
    pub camera: CameraModel,
}

impl SceneSpec {
    /// Checks structure; with `range`, also that every disparity lies in it.
    pub fn validate(&self, range: Option<(f64, f64)>) -> Result<()> {
        let op = "SceneSpec";
        if self.layers.is_empty() {
            return Err(invalid(op, "a scene needs at least one layer"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(invalid(op, "image size must be positive"));
        }
        if self.layers[0].rect.is_some() {
            return Err(invalid(
                op,
                "the first layer must cover the full frame (no rect)",
            ));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let d = layer.disparity;
            if !(d.is_finite() && d >= 0.0) {
                return Err(invalid(
                    op,
                    format!("layer {i}: disparity {d} must be finite and >= 0"),
                ));
            }
            if let Some((lo, hi)) = range {
                if d < lo || d > hi {
                    return Err(invalid(
                        op,
                        format!("layer {i}: disparity {d} outside [{lo}, {hi}]"),
                    ));
                }
            }
            if i > 0 {
                let prev = self.layers[i - 1].disparity;
                if d <= prev {
                    return Err(invalid(
                        op,
                        format!("layer {i}: disparity {d} must exceed that of the layer behind it ({prev})"),
                    ));
                }
                let r = layer.rect.ok_or_else(|| {
                    invalid(
                        op,
                        format!("layer {i}: only the first layer may omit its rect"),
                    )
                })?;
                if r.x0 >= r.x1 || r.y0 >= r.y1 {
                    return Err(invalid(op, format!("layer {i}: empty rect {r:?}")));
                }
                if r.x0 < 0 || r.y0 < 0 || r.x1 > self.width as i64 || r.y1 > self.height as i64 {
                    return Err(invalid(
                        op,
                        format!("layer {i}: rect {r:?} leaves the frame"),
                    ));
                }
            }
            layer
                .texture
                .validate()
                .map_err(|m| invalid(op, format!("layer {i}: {m}")))?;
        }
        Ok(())
    }

    /// Index of the front-most layer at `(x, y)` of `view`.
    fn top_layer(&self, view: View, x: usize, y: usize) -> usize {
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let u = match view {
                View::Left => x as f64,
                View::Right => x as f64 + layer.disparity,
            };
            match layer.rect {
                None => return i,
                Some(r) if r.contains(u, y as f64) => return i,
                Some(_) => {}
            }
        }
        0
    }
}

/// A rectified pair with optional ground truth.
///
/// Images are `[1, 3, H, W]` in `[0, 1]`; disparities `[1, 1, H, W]` in
/// pixels; visibility masks `[1, 1, H, W]` with 1 where the pixel is also
/// seen by the other camera.
#[derive(Clone, Debug)]
pub struct StereoSample {
    pub left: Tensor<f32>,
    pub right: Tensor<f32>,
    pub disparity_left: Option<Tensor<f32>>,
    pub disparity_right: Option<Tensor<f32>>,
    pub visible_left: Option<Tensor<f32>>,
    pub visible_right: Option<Tensor<f32>>,
    pub camera: CameraModel,
}

impl StereoSample {
    pub fn height(&self) -> usize {
        self.left.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.left.shape()[3]
    }

    pub fn image(&self, view: View) -> &Tensor<f32> {
        match view {
            View::Left => &self.left,
            View::Right => &self.right,
        }
    }

    pub fn disparity(&self, view: View) -> Option<&Tensor<f32>> {
        match view {
            View::Left => self.disparity_left.as_ref(),
            View::Right => self.disparity_right.as_ref(),
        }
    }

    pub fn visibility(&self, view: View) -> Option<&Tensor<f32>> {
        match view {
            View::Left => self.visible_left.as_ref(),
            View::Right => self.visible_right.as_ref(),
        }
    }

    /// Fill the visibility masks from the disparity maps with the z-buffer.
    pub fn compute_visibility(&mut self) -> Result<()> {
        if let (Some(dl), Some(dr)) = (&self.disparity_left, &self.disparity_right) {
            let [_, _, h, w] = dl.dims4()?;
            let vr = zbuffer(dl.data(), h, w, View::Left).visible;
            let vl = zbuffer(dr.data(), h, w, View::Right).visible;
            self.visible_right = Some(mask_tensor(&vr, h, w));
            self.visible_left = Some(mask_tensor(&vl, h, w));
        }
        Ok(())
    }
}

fn mask_tensor(v: &[bool], h: usize, w: usize) -> Tensor<f32> {
    Tensor::new(
        vec![1, 1, h, w],
        v.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
    )
    .expect("mask size")
}

/// Render both views with the painter's algorithm and derive visibility.
pub fn render(spec: &SceneSpec) -> Result<StereoSample> {
    spec.validate(None)?;
    let (h, w) = (spec.height, spec.width);
    let plane = h * w;
    let mut images = [vec![0f32; 3 * plane], vec![0f32; 3 * plane]];
    let mut disps = [vec![0f32; plane], vec![0f32; plane]];
    for (vi, view) in [View::Left, View::Right].into_iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let li = spec.top_layer(view, x, y);
                let layer = &spec.layers[li];
                let u = match view {
                    View::Left => x as f64,
                    View::Right => x as f64 + layer.disparity,
                };
                let rgb = layer.texture.sample(u, y as f64);
                for c in 0..3 {
                    images[vi][c * plane + y * w + x] = rgb[c];
                }
                disps[vi][y * w + x] = layer.disparity as f32;
            }
        }
    }
    let [il, ir] = images;
    let [dl, dr] = disps;
    let mut sample = StereoSample {
        left: Tensor::new(vec![1, 3, h, w], il)?,
        right: Tensor::new(vec![1, 3, h, w], ir)?,
        disparity_left: Some(Tensor::new(vec![1, 1, h, w], dl)?),
        disparity_right: Some(Tensor::new(vec![1, 1, h, w], dr)?),
        visible_left: None,
        visible_right: None,
        camera: spec.camera,
    };
    sample.compute_visibility()?;
    Ok(sample)
}

/// Forward projection of one view's disparity map into the other view.
#[derive(Clone, Debug, PartialEq)]
pub struct ZBuffer {
    /// Target pixels hit by at least one source pixel.
    pub visible: Vec<bool>,
    /// Largest (nearest) disparity landing on each target pixel, 0 if none.
    pub depth: Vec<f64>,
}

/// Column a source pixel lands on in the other view (`x_R = x_L − d`).
fn target_column(x: usize, d: f64, source: View) -> f64 {
    match source {
        View::Left => x as f64 - d,
        View::Right => x as f64 + d,
    }
}

/// Project `disp` (`h × w`, aligned to `source`) into the other view.
/// A source pixel lands on the target column nearest to `x ∓ d`.
pub fn zbuffer(disp: &[f32], h: usize, w: usize, source: View) -> ZBuffer {
    let mut visible = vec![false; h * w];
    let mut depth = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let d = disp[y * w + x] as f64;
            let t = target_column(x, d, source).round();
            if t >= 0.0 && t < w as f64 {
                let i = y * w + t as usize;
                visible[i] = true;
                if d > depth[i] {
                    depth[i] = d;
                }
            }
        }
    }
    ZBuffer { visible, depth }
}

/// `O(h·w²)` reference for [`zbuffer`] visibility: scan every source pixel
/// of the row for each target pixel.
pub fn visibility_brute_force(disp: &[f32], h: usize, w: usize, source: View) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for t in 0..w {
            out[y * w + t] = (0..w)
                .any(|x| target_column(x, disp[y * w + x] as f64, source).round() == t as f64);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OneHotMode {
    /// All mass on the nearest level, ties to the lower index.
    Nearest,
    /// Linear split between the two bracketing levels.
    Interpolate,
}

const RANGE_TOLERANCE: f64 = 1e-9;

fn bracket(levels: &[f64], d: f64) -> usize {
    // largest k with levels[k] <= d, clamped so k + 1 is valid
    let k = levels.partition_point(|&l| l <= d);
    k.saturating_sub(1).min(levels.len() - 2)
}

/// Place ground-truth disparities `[B, 1, H, W]` onto the level grid.
pub fn one_hot_volume<F: Real>(
    gt: &Tensor<F>,
    levels: &DisparityLevels,
    mode: OneHotMode,
    view: View,
) -> Result<MedVolume<F>> {
    let [b, c, h, w] = gt.dims4()?;
    if c != 1 {
        return Err(invalid(
            "one_hot_volume",
            format!("expected 1 channel, got {c}"),
        ));
    }
    let lv = levels.values();
    let l = lv.len();
    let (lo, hi) = (lv[0], lv[l - 1]);
    let plane = h * w;
    let mut probs = Tensor::zeros(vec![b, l, h, w]);
    for bi in 0..b {
        for p in 0..plane {
            let d = gt.data()[bi * plane + p].to_f64_lossy();
            if !(d >= lo - RANGE_TOLERANCE && d <= hi + RANGE_TOLERANCE) {
                return Err(invalid(
                    "one_hot_volume",
                    format!("disparity {d} outside [{lo}, {hi}]"),
                ));
            }
            let k = bracket(lv, d);
            let gap = lv[k + 1] - lv[k];
            let t = if gap > 0.0 {
                ((d - lv[k]) / gap).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let out = probs.data_mut();
            let at = |n: usize| (bi * l + n) * plane + p;
            match mode {
                OneHotMode::Nearest => {
                    let n = if t > 0.5 { k + 1 } else { k };
                    out[at(n)] = F::one();
                }
                OneHotMode::Interpolate => {
                    out[at(k)] = F::from_f64_lossy(1.0 - t);
                    out[at(k + 1)] += F::from_f64_lossy(t);
                }
            }
        }
    }
    MedVolume::from_probs(probs, levels, view, view)
}

/// Logits whose softmax is (numerically) one-hot at the nearest level, with
/// larger logits for larger disparities. After warping into the other view,
/// where several levels land on one pixel the nearest surface wins, and
/// pixels nothing lands on stay all-zero.
pub fn oracle_logits<F: Real>(
    gt: &Tensor<F>,
    levels: &DisparityLevels,
    sharpness: f64,
) -> Result<Tensor<F>> {
    let vol = one_hot_volume(gt, levels, OneHotMode::Nearest, View::Left)?;
    let [b, l, h, w] = vol.probs().dims4()?;
    let mut out = vol.into_probs();
    let plane = h * w;
    for bi in 0..b {
        for n in 0..l {
            let s = F::from_f64_lossy(sharpness * (n + 1) as f64);
            for v in &mut out.data_mut()[(bi * l + n) * plane..(bi * l + n + 1) * plane] {
                *v *= s;
            }
        }
    }
    Ok(out)
}

/// The four volumes of a pair, built from ground-truth disparities through
/// [`oracle_logits`] exactly as a network's logits would be.
#[derive(Clone, Debug)]
pub struct OracleVolumes {
    pub left_from_left: MedVolume<f64>,
    pub left_from_right: MedVolume<f64>,
    pub right_from_right: MedVolume<f64>,
    pub right_from_left: MedVolume<f64>,
}

impl OracleVolumes {
    pub fn mirrored(&self) -> MirroredVolumes<'_, f64> {
        MirroredVolumes {
            left_from_left: &self.left_from_left,
            left_from_right: &self.left_from_right,
            right_from_right: &self.right_from_right,
            right_from_left: &self.right_from_left,
        }
    }
}

pub fn oracle_volumes(
    sample: &StereoSample,
    levels: &DisparityLevels,
    sharpness: f64,
) -> Result<OracleVolumes> {
    let pass = |view: View| -> Result<(MedVolume<f64>, MedVolume<f64>)> {
        let gt = sample
            .disparity(view)
            .ok_or_else(|| {
                invalid(
                    "oracle_volumes",
                    format!("no {view} ground-truth disparity"),
                )
            })?
            .cast::<f64>();
        let logits = oracle_logits(&gt, levels, sharpness)?;
        let own = MedVolume::from_logits(&logits, levels, view, view)?;
        let mut tape = Tape::new();
        let x = tape.constant(logits);
        let cross = cross_volume_on(&mut tape, x, levels, view)?;
        Ok((own, volume_from_tape(&tape, cross, levels)))
    };
    let (left_from_left, right_from_left) = pass(View::Left)?;
    let (right_from_right, left_from_right) = pass(View::Right)?;
    Ok(OracleVolumes {
        left_from_left,
        left_from_right,
        right_from_right,
        right_from_left,
    })
}

/// Intersection over union of two boolean masks; 1 when both are empty.
pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
