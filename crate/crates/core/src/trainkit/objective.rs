use gradcore::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::falnet::FalNet;
use crate::losses::{
    mirror_loss_on, reconstruction_loss_on, smoothness_loss_on, total_loss_on, FeatureExtractor,
    LossValues, LossWeights, TrainStep, ViewTerms,
};
use crate::medvol::{view_pass_on, volume_from_tape, View};
use crate::mom::{mirrored_disparity, occlusion_masks, MirroredVolumes, OcclusionMask};
use crate::quantize::DisparityLevels;

/// Where the occlusion masks come from in step 2.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Derived from the four probability volumes of each pair.
    #[default]
    Mom,
    /// Forced to 1 everywhere, which also zeroes the mirror terms.
    Ones,
}

/// The full per-batch objective for one set of weights.
pub struct Objective<'a> {
    pub levels: &'a DisparityLevels,
    pub weights: &'a LossWeights,
    pub masks: MaskMode,
    /// Frozen network providing mirrored disparity targets. Step 2 adds
    /// the mirror terms whenever it is present.
    pub fixed: Option<&'a FalNet<f32>>,
    pub features: Option<&'a dyn FeatureExtractor<f32>>,
}

pub struct ObjectiveParts {
    /// Terms of the left-input pass.
    pub left: ViewTerms,
    /// Terms of the right-input (flipped) pass.
    pub right: ViewTerms,
    pub total: Var,
    pub mask_left: OcclusionMask<f32>,
    pub mask_right: OcclusionMask<f32>,
}

impl ObjectiveParts {
    pub fn values(&self, tape: &Tape<f32>) -> LossValues {
        LossValues::read(tape, self.left, self.right, self.total)
    }
}

impl Objective<'_> {
    /// Build the objective for stereo batches `left`/`right` `[P, 3, H, W]`
    /// with the network parameters already bound to `tape`.
    pub fn build_on(
        &self,
        tape: &mut Tape<f32>,
        model: &FalNet<f32>,
        bound: &[Var],
        left: &Tensor<f32>,
        right: &Tensor<f32>,
    ) -> Result<ObjectiveParts> {
        if left.shape() != right.shape() {
            return Err(invalid(
                "objective",
                format!(
                    "left batch {:?} and right batch {:?} differ",
                    left.shape(),
                    right.shape()
                ),
            ));
        }
        let step = self.weights.step;
        if step == TrainStep::Two && self.masks == MaskMode::Mom && self.fixed.is_none() {
            return Err(invalid(
                "objective",
                "step 2 with occlusion masks needs a fixed network",
            ));
        }
        let [p, _, h, w] = left.dims4()?;
        let xl = tape.constant(left.clone());
        let xr = tape.constant(right.clone());
        let logits_l = model.forward_on(tape, bound, xl)?;
        let logits_r = model.forward_as_right_on(tape, bound, xr)?;
        let pass_l = view_pass_on(tape, xl, logits_l, self.levels, View::Left)?;
        let pass_r = view_pass_on(tape, xr, logits_r, self.levels, View::Right)?;

        let (mask_left, mask_right) = match (step, self.masks) {
            (TrainStep::Two, MaskMode::Mom) => {
                let ll = volume_from_tape(tape, pass_l.own, self.levels);
                let rl = volume_from_tape(tape, pass_l.cross, self.levels);
                let rr = volume_from_tape(tape, pass_r.own, self.levels);
                let lr = volume_from_tape(tape, pass_r.cross, self.levels);
                occlusion_masks(MirroredVolumes {
                    left_from_left: &ll,
                    left_from_right: &lr,
                    right_from_right: &rr,
                    right_from_left: &rl,
                })?
            }
            _ => (
                OcclusionMask::ones([p, 1, h, w], View::Left),
                OcclusionMask::ones([p, 1, h, w], View::Right),
            ),
        };

        let alpha_p = self.weights.alpha_p;
        let rec_l = reconstruction_loss_on(
            tape,
            pass_l.synthesized,
            xr,
            &mask_right,
            self.features,
            alpha_p,
        )?;
        let rec_r = reconstruction_loss_on(
            tape,
            pass_r.synthesized,
            xl,
            &mask_left,
            self.features,
            alpha_p,
        )?;
        let (mirror_l, mirror_r) = match (step, self.fixed) {
            (TrainStep::Two, Some(fixed)) => {
                let ml = mirrored_disparity(left, fixed, self.levels, View::Left)?;
                let mr = mirrored_disparity(right, fixed, self.levels, View::Right)?;
                (
                    Some(mirror_loss_on(tape, pass_l.disparity, &ml, &mask_left)?),
                    Some(mirror_loss_on(tape, pass_r.disparity, &mr, &mask_right)?),
                )
            }
            _ => (None, None),
        };
        let gamma = self.weights.gamma;
        let smooth_l = smoothness_loss_on(tape, pass_l.disparity, left, gamma)?;
        let smooth_r = smoothness_loss_on(tape, pass_r.disparity, right, gamma)?;
        let left_terms = ViewTerms {
            reconstruction: rec_l,
            mirror: mirror_l,
            smoothness: smooth_l,
        };
        let right_terms = ViewTerms {
            reconstruction: rec_r,
            mirror: mirror_r,
            smoothness: smooth_r,
        };
        let total = total_loss_on(tape, left_terms, right_terms, self.weights.alpha_ds)?;
        Ok(ObjectiveParts {
            left: left_terms,
            right: right_terms,
            total,
            mask_left,
            mask_right,
        })
    }

    /// Loss values without gradients.
    pub fn evaluate(
        &self,
        model: &FalNet<f32>,
        left: &Tensor<f32>,
        right: &Tensor<f32>,
    ) -> Result<(LossValues, [f64; 2])> {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let parts = self.build_on(&mut tape, model, &bound, left, right)?;
        Ok((
            parts.values(&tape),
            [parts.mask_left.coverage(), parts.mask_right.coverage()],
        ))
    }
}
