//! Occlusion masks from mirrored probability volumes, and mirrored
//! disparity targets from a frozen network.
//!
//! A view's mask is built from the two volumes aligned to the *other* view:
//! each is shifted into this view level by level, summed over levels (how
//! much probability mass landed on each pixel), and the two coverages are
//! multiplied and clamped to `[0, 1]`. Pixels that no source pixel maps to
//! receive no mass and read as occluded.

use gradcore::kernels::{flip_w, sum_channels};
use gradcore::{Real, Tensor};

use crate::error::{invalid, Error, Result};
use crate::falnet::FalNet;
use crate::medvol::{disparity_from_volume, MedVolume, View};
use crate::quantize::DisparityLevels;
use crate::warp::warp_volume;

#[derive(Clone, Debug)]
pub struct OcclusionMask<F> {
    values: Tensor<F>,
    view: View,
}

impl<F: Real> OcclusionMask<F> {
    /// Wrap arbitrary values, clamping them into `[0, 1]`.
    pub fn new(values: Tensor<F>, view: View) -> Result<Self> {
        let [_, c, _, _] = values.dims4()?;
        if c != 1 {
            return Err(invalid(
                "OcclusionMask",
                format!("expected 1 channel, got {c}"),
            ));
        }
        Ok(Self {
            values: values.map(|v| v.max(F::zero()).min(F::one())),
            view,
        })
    }

    /// The all-visible mask, reducing the masked losses to their plain form.
    pub fn ones(shape: [usize; 4], view: View) -> Self {
        Self {
            values: Tensor::ones(vec![shape[0], 1, shape[2], shape[3]]),
            view,
        }
    }

    pub fn values(&self) -> &Tensor<F> {
        &self.values
    }

    pub fn view(&self) -> View {
        self.view
    }

    pub fn coverage(&self) -> f64 {
        self.values.mean().to_f64_lossy()
    }

    /// Binary visibility at `threshold`.
    pub fn binarize(&self, threshold: f64) -> Vec<bool> {
        self.values
            .data()
            .iter()
            .map(|v| v.to_f64_lossy() >= threshold)
            .collect()
    }
}

/// Mass arriving at each pixel of the other view: `Σ_n g(V_n, d_n)`.
pub fn arriving_mass<F: Real>(vol: &MedVolume<F>) -> Result<Tensor<F>> {
    if vol.is_warped() {
        return Err(invalid(
            "arriving_mass",
            "volume must be normalized, not already warped",
        ));
    }
    let moved = warp_volume(vol.probs(), vol.levels(), vol.aligned().outward())?;
    Ok(sum_channels(&moved)?)
}

/// Mask for the view opposite to the one `a` and `b` are aligned to.
/// `a` and `b` must come from different input views.
pub fn occlusion_mask<F: Real>(a: &MedVolume<F>, b: &MedVolume<F>) -> Result<OcclusionMask<F>> {
    b.expect_aligned("occlusion_mask", a.aligned())?;
    if a.source() == b.source() {
        return Err(invalid(
            "occlusion_mask",
            format!(
                "both volumes come from the {} input; need one from each view",
                a.source()
            ),
        ));
    }
    if a.levels() != b.levels() {
        return Err(invalid(
            "occlusion_mask",
            "volumes use different disparity levels",
        ));
    }
    let ma = arriving_mass(a)?;
    let mb = arriving_mass(b)?;
    let prod = ma.zip_map(&mb, "occlusion_mask", |x, y| x * y)?;
    OcclusionMask::new(prod, a.aligned().other())
}

/// The four volumes of one training pair.
#[derive(Clone, Copy, Debug)]
pub struct MirroredVolumes<'a, F> {
    /// Left-aligned, from the left input.
    pub left_from_left: &'a MedVolume<F>,
    /// Left-aligned, from the right input.
    pub left_from_right: &'a MedVolume<F>,
    /// Right-aligned, from the right input.
    pub right_from_right: &'a MedVolume<F>,
    /// Right-aligned, from the left input.
    pub right_from_left: &'a MedVolume<F>,
}

/// `(O^L, O^R)`. The right mask comes from the left-aligned volumes warped
/// left-to-right; the left mask from the right-aligned volumes warped back.
pub fn occlusion_masks<F: Real>(
    v: MirroredVolumes<'_, F>,
) -> Result<(OcclusionMask<F>, OcclusionMask<F>)> {
    let tagged = [
        (v.left_from_left, View::Left, View::Left),
        (v.left_from_right, View::Left, View::Right),
        (v.right_from_right, View::Right, View::Right),
        (v.right_from_left, View::Right, View::Left),
    ];
    for (vol, aligned, source) in tagged {
        vol.expect_aligned("occlusion_masks", aligned)?;
        if vol.source() != source {
            return Err(Error::Alignment {
                op: "occlusion_masks (input view)",
                expected: source,
                actual: vol.source(),
            });
        }
    }
    let right = occlusion_mask(v.left_from_left, v.left_from_right)?;
    let left = occlusion_mask(v.right_from_right, v.right_from_left)?;
    Ok((left, right))
}

/// Disparity targets from a frozen network, detached from any tape.
#[derive(Clone, Debug)]
pub struct MirroredDisparity<F> {
    values: Tensor<F>,
    view: View,
}

impl<F: Real> MirroredDisparity<F> {
    /// Wrap precomputed targets `[B, 1, H, W]` aligned to `view`.
    pub fn from_values(values: Tensor<F>, view: View) -> Result<Self> {
        let [_, c, _, _] = values.dims4()?;
        if c != 1 {
            return Err(invalid(
                "MirroredDisparity",
                format!("expected 1 channel, got {c}"),
            ));
        }
        Ok(Self { values, view })
    }

    pub fn values(&self) -> &Tensor<F> {
        &self.values
    }

    pub fn view(&self) -> View {
        self.view
    }

    /// Largest value of each batch item.
    pub fn per_image_max(&self) -> Result<Vec<F>> {
        let [b, _, _, _] = self.values.dims4()?;
        let per = self.values.numel() / b.max(1);
        Ok(self
            .values
            .data()
            .chunks(per)
            .map(|c| c.iter().copied().fold(F::neg_infinity(), F::max))
            .collect())
    }
}

/// Disparity for `image` as seen by `fixed` when treated as the *opposite*
/// view. For a left image this is `flip(D(flip(I)))`; for a right image,
/// whose regular pass already uses the flip, it is the direct pass.
pub fn mirrored_disparity<F: Real>(
    image: &Tensor<F>,
    fixed: &FalNet<F>,
    levels: &DisparityLevels,
    view: View,
) -> Result<MirroredDisparity<F>> {
    let logits = match view {
        View::Left => flip_w(&fixed.forward(&flip_w(image)?)?)?,
        View::Right => fixed.forward(image)?,
    };
    let vol = MedVolume::from_logits(&logits, levels, view, view)?;
    Ok(MirroredDisparity {
        values: disparity_from_volume(&vol)?,
        view,
    })
}
