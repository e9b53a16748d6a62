//! Per-pixel probability volumes over disparity levels: disparity regression
//! and probability-weighted view synthesis.
//!
//! Volumes are tagged with the camera view they are aligned to and the view
//! whose image produced them. A left-input network pass yields the
//! left-aligned volume `softmax(logits)` and the right-aligned volume
//! `softmax(warp(logits))`; a right-input pass mirrors this.

use std::fmt;

use gradcore::kernels::{scale_channels, softmax_channels, sum_channels};
use gradcore::{CustomOp, Real, Tape, Tensor, Var};

use crate::error::{invalid, Error, Result};
use crate::quantize::DisparityLevels;
use crate::warp::{warp_volume, warp_volume_on, Taps, WarpDirection};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum View {
    Left,
    Right,
}

impl View {
    pub fn other(self) -> Self {
        match self {
            View::Left => View::Right,
            View::Right => View::Left,
        }
    }

    /// Direction carrying content from this view into the other one.
    pub fn outward(self) -> WarpDirection {
        match self {
            View::Left => WarpDirection::LtoR,
            View::Right => WarpDirection::RtoL,
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            View::Left => "left",
            View::Right => "right",
        })
    }
}

/// Tolerance on the per-pixel channel sum of a normalized volume.
pub const SUM_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct MedVolume<F> {
    probs: Tensor<F>,
    levels: DisparityLevels,
    aligned: View,
    source: View,
    warped: bool,
}

impl<F: Real> MedVolume<F> {
    /// Softmax over the channels of `logits`.
    pub fn from_logits(
        logits: &Tensor<F>,
        levels: &DisparityLevels,
        aligned: View,
        source: View,
    ) -> Result<Self> {
        check_channels("MedVolume::from_logits", logits, levels)?;
        Ok(Self {
            probs: softmax_channels(logits)?,
            levels: levels.clone(),
            aligned,
            source,
            warped: false,
        })
    }

    /// Wrap an already-normalized volume, checking range and channel sums.
    pub fn from_probs(
        probs: Tensor<F>,
        levels: &DisparityLevels,
        aligned: View,
        source: View,
    ) -> Result<Self> {
        check_channels("MedVolume::from_probs", &probs, levels)?;
        if probs
            .data()
            .iter()
            .any(|&p| !(p >= F::zero() && p <= F::one()))
        {
            return Err(invalid(
                "MedVolume::from_probs",
                "probabilities must lie in [0, 1]",
            ));
        }
        let sums = sum_channels(&probs)?;
        if let Some(bad) = sums
            .data()
            .iter()
            .find(|s| (s.to_f64_lossy() - 1.0).abs() > SUM_TOLERANCE)
        {
            return Err(invalid(
                "MedVolume::from_probs",
                format!("channel sum {bad} differs from 1 by more than {SUM_TOLERANCE}"),
            ));
        }
        Ok(Self {
            probs,
            levels: levels.clone(),
            aligned,
            source,
            warped: false,
        })
    }

    /// Shift every level into the opposite camera. The result is no longer
    /// normalized near the borders and is tagged as warped.
    pub fn warp_to_other(&self) -> Result<Self> {
        let dir = self.aligned.outward();
        Ok(Self {
            probs: warp_volume(&self.probs, &self.levels, dir)?,
            levels: self.levels.clone(),
            aligned: self.aligned.other(),
            source: self.source,
            warped: true,
        })
    }

    pub fn probs(&self) -> &Tensor<F> {
        &self.probs
    }

    pub fn into_probs(self) -> Tensor<F> {
        self.probs
    }

    pub fn levels(&self) -> &DisparityLevels {
        &self.levels
    }

    pub fn aligned(&self) -> View {
        self.aligned
    }

    pub fn source(&self) -> View {
        self.source
    }

    pub fn is_warped(&self) -> bool {
        self.warped
    }

    pub fn expect_aligned(&self, op: &'static str, view: View) -> Result<()> {
        if self.aligned != view {
            return Err(Error::Alignment {
                op,
                expected: view,
                actual: self.aligned,
            });
        }
        Ok(())
    }
}

fn check_channels<F: Real>(
    op: &'static str,
    t: &Tensor<F>,
    levels: &DisparityLevels,
) -> Result<()> {
    let c = t.dims4()?[1];
    if c != levels.len() {
        return Err(invalid(
            op,
            format!("{c} channels but {} levels", levels.len()),
        ));
    }
    Ok(())
}

/// Expected disparity `Σ_n d_n·p_n`, aligned to the volume's view.
pub fn disparity_from_volume<F: Real>(v: &MedVolume<F>) -> Result<Tensor<F>> {
    if v.warped {
        return Err(invalid(
            "disparity_from_volume",
            "volume was warped after normalization; its channels no longer sum to one",
        ));
    }
    Ok(sum_channels(&scale_channels(
        &v.probs,
        &v.levels.as_real::<F>(),
    )?)?)
}

/// [`disparity_from_volume`] with an alignment check.
pub fn disparity_for_view<F: Real>(v: &MedVolume<F>, view: View) -> Result<Tensor<F>> {
    v.expect_aligned("disparity_for_view", view)?;
    disparity_from_volume(v)
}

/// A normalized volume living on a tape.
#[derive(Clone, Copy, Debug)]
pub struct VolumeVar {
    pub var: Var,
    pub aligned: View,
    pub source: View,
}

/// `softmax(logits)`, aligned to `view` (the input view).
pub fn own_volume_on<F: Real>(tape: &mut Tape<F>, logits: Var, view: View) -> Result<VolumeVar> {
    Ok(VolumeVar {
        var: tape.softmax_channels(logits)?,
        aligned: view,
        source: view,
    })
}

/// `softmax(warp(logits))`: logits are shifted into the other camera before
/// normalization, so fully zero-filled pixels become uniform.
pub fn cross_volume_on<F: Real>(
    tape: &mut Tape<F>,
    logits: Var,
    levels: &DisparityLevels,
    source: View,
) -> Result<VolumeVar> {
    let warped = warp_volume_on(tape, logits, levels, source.outward())?;
    Ok(VolumeVar {
        var: tape.softmax_channels(warped)?,
        aligned: source.other(),
        source,
    })
}

/// Differentiable expected disparity of a normalized volume.
pub fn disparity_on<F: Real>(
    tape: &mut Tape<F>,
    vol: VolumeVar,
    levels: &DisparityLevels,
) -> Result<Var> {
    let weighted = tape.scale_channels(vol.var, &levels.as_real::<F>())?;
    Ok(tape.sum_channels(weighted)?)
}

/// `out[c] = Σ_n shift(image[c], d_n)·probs[n]`, fused so the per-level
/// shifted images are never materialized.
fn weighted_shift_sum<F: Real>(
    image: &Tensor<F>,
    probs: &Tensor<F>,
    shifts: &[f64],
) -> Result<Tensor<F>> {
    let [b, c, h, w] = image.dims4()?;
    let [pb, l, ph, pw] = probs.dims4()?;
    if (pb, ph, pw) != (b, h, w) {
        return Err(invalid(
            "synthesize",
            format!(
                "image {:?} and volume {:?} differ in batch or spatial size",
                image.shape(),
                probs.shape()
            ),
        ));
    }
    let taps: Vec<Taps<F>> = shifts.iter().map(|&s| Taps::new(s)).collect();
    let mut out = Tensor::zeros(vec![b, c, h, w]);
    let mut row = vec![F::zero(); w];
    let (src, p) = (image.data(), probs.data());
    let dst = out.data_mut();
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                let r = ((bi * c + ci) * h + y) * w;
                for (n, t) in taps.iter().enumerate() {
                    t.apply(&src[r..r + w], &mut row);
                    let pr = ((bi * l + n) * h + y) * w;
                    for ((o, &s), &q) in dst[r..r + w].iter_mut().zip(&row).zip(&p[pr..pr + w]) {
                        *o += s * q;
                    }
                }
            }
        }
    }
    Ok(out)
}

struct WeightedShiftSum {
    shifts: Vec<f64>,
}

impl<F: Real> CustomOp<F> for WeightedShiftSum {
    fn name(&self) -> &'static str {
        "weighted_shift_sum"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        _output: &Tensor<F>,
        grad: &Tensor<F>,
    ) -> gradcore::Result<Vec<Option<Tensor<F>>>> {
        let (image, probs) = (inputs[0], inputs[1]);
        let [b, c, h, w] = image.dims4()?;
        let l = probs.dims4()?[1];
        let taps: Vec<Taps<F>> = self.shifts.iter().map(|&s| Taps::new(s)).collect();
        let mut g_img = Tensor::zeros(image.shape().to_vec());
        let mut g_p = Tensor::zeros(probs.shape().to_vec());
        let mut row = vec![F::zero(); w];
        let mut weighted = vec![F::zero(); w];
        let (src, p, g) = (image.data(), probs.data(), grad.data());
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    let r = ((bi * c + ci) * h + y) * w;
                    for (n, t) in taps.iter().enumerate() {
                        let pr = ((bi * l + n) * h + y) * w;
                        t.apply(&src[r..r + w], &mut row);
                        let gp = &mut g_p.data_mut()[pr..pr + w];
                        for x in 0..w {
                            gp[x] += g[r + x] * row[x];
                            weighted[x] = g[r + x] * p[pr + x];
                        }
                        t.accumulate_adjoint(&weighted, &mut g_img.data_mut()[r..r + w]);
                    }
                }
            }
        }
        Ok(vec![Some(g_img), Some(g_p)])
    }
}

/// Synthesize the view `vol` is aligned to from the image of its source
/// view: `I'(x) = Σ_n g(I, d_n)(x)·vol_n(x)`.
pub fn synthesize_on<F: Real>(
    tape: &mut Tape<F>,
    image: Var,
    vol: VolumeVar,
    levels: &DisparityLevels,
) -> Result<Var> {
    if vol.aligned == vol.source {
        return Err(Error::Alignment {
            op: "synthesize",
            expected: vol.source.other(),
            actual: vol.aligned,
        });
    }
    check_channels("synthesize", tape.value(vol.var), levels)?;
    let sign = vol.source.outward().sign();
    let shifts: Vec<f64> = levels.values().iter().map(|&d| sign * d).collect();
    let value = weighted_shift_sum(tape.value(image), tape.value(vol.var), &shifts)?;
    Ok(tape.custom(
        &[image, vol.var],
        value,
        Box::new(WeightedShiftSum { shifts }),
    ))
}

/// Differentiable right-view synthesis from a left image and its raw logits.
/// Returns `I'_R` and the right-aligned volume built from the left input.
pub fn synth_right_on<F: Real>(
    tape: &mut Tape<F>,
    left_image: Var,
    logits: Var,
    levels: &DisparityLevels,
) -> Result<(Var, VolumeVar)> {
    let vol = cross_volume_on(tape, logits, levels, View::Left)?;
    let img = synthesize_on(tape, left_image, vol, levels)?;
    Ok((img, vol))
}

/// Gradient-free [`synth_right_on`].
pub fn synth_right<F: Real>(
    left_image: &Tensor<F>,
    logits: &Tensor<F>,
    levels: &DisparityLevels,
) -> Result<(Tensor<F>, MedVolume<F>)> {
    let mut tape = Tape::new();
    let i = tape.constant(left_image.clone());
    let z = tape.constant(logits.clone());
    let (img, vol) = synth_right_on(&mut tape, i, z, levels)?;
    let probs = tape.value(vol.var).clone();
    let volume = MedVolume {
        probs,
        levels: levels.clone(),
        aligned: View::Right,
        source: View::Left,
        warped: false,
    };
    Ok((tape.value(img).clone(), volume))
}

/// Everything derived from one network pass on one input view.
#[derive(Clone, Copy, Debug)]
pub struct ViewPass {
    pub source: View,
    /// Logits aligned to `source`.
    pub logits: Var,
    /// `softmax(logits)`, aligned to `source`.
    pub own: VolumeVar,
    /// Normalized volume warped into the other view.
    pub cross: VolumeVar,
    /// Expected disparity aligned to `source`.
    pub disparity: Var,
    /// The other view, synthesized from the `source` image.
    pub synthesized: Var,
}

pub fn view_pass_on<F: Real>(
    tape: &mut Tape<F>,
    image: Var,
    logits: Var,
    levels: &DisparityLevels,
    source: View,
) -> Result<ViewPass> {
    check_channels("view_pass", tape.value(logits), levels)?;
    let own = own_volume_on(tape, logits, source)?;
    let cross = cross_volume_on(tape, logits, levels, source)?;
    let disparity = disparity_on(tape, own, levels)?;
    let synthesized = synthesize_on(tape, image, cross, levels)?;
    Ok(ViewPass {
        source,
        logits,
        own,
        cross,
        disparity,
        synthesized,
    })
}

/// Snapshot a tape volume as a detached [`MedVolume`].
pub fn volume_from_tape<F: Real>(
    tape: &Tape<F>,
    vol: VolumeVar,
    levels: &DisparityLevels,
) -> MedVolume<F> {
    MedVolume {
        probs: tape.value(vol.var).clone(),
        levels: levels.clone(),
        aligned: vol.aligned,
        source: vol.source,
        warped: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantize::{make_levels, QuantMode};

    #[test]
    fn uniform_volume_gives_mean_level() {
        let levels = make_levels(5, 1.0, 16.0, QuantMode::Exponential).unwrap();
        let v = MedVolume::from_logits(
            &Tensor::<f64>::zeros(vec![1, 5, 2, 3]),
            &levels,
            View::Left,
            View::Left,
        )
        .unwrap();
        let d = disparity_from_volume(&v).unwrap();
        let mean = levels.values().iter().sum::<f64>() / 5.0;
        assert!(d.data().iter().all(|&x| (x - mean).abs() < 1e-12));
    }

    #[test]
    fn warped_volume_is_rejected() {
        let levels = make_levels(3, 1.0, 4.0, QuantMode::Linear).unwrap();
        let v = MedVolume::from_logits(
            &Tensor::<f64>::zeros(vec![1, 3, 2, 8]),
            &levels,
            View::Left,
            View::Left,
        )
        .unwrap();
        let w = v.warp_to_other().unwrap();
        assert!(w.is_warped());
        assert_eq!(w.aligned(), View::Right);
        assert!(disparity_from_volume(&w).is_err());
    }

    #[test]
    fn alignment_mismatch_is_an_error() {
        let levels = make_levels(3, 1.0, 4.0, QuantMode::Linear).unwrap();
        let v = MedVolume::from_logits(
            &Tensor::<f64>::zeros(vec![1, 3, 2, 8]),
            &levels,
            View::Right,
            View::Left,
        )
        .unwrap();
        assert!(matches!(
            disparity_for_view(&v, View::Left),
            Err(Error::Alignment { .. })
        ));
        assert!(disparity_for_view(&v, View::Right).is_ok());
    }

    #[test]
    fn zero_shift_level_reproduces_the_image() {
        let levels = DisparityLevels::custom(vec![0.0, 3.0]).unwrap();
        let img = Tensor::from_fn(vec![1, 3, 2, 5], |i| i as f64 / 30.0);
        let mut logits = Tensor::zeros(vec![1, 2, 2, 5]);
        for v in &mut logits.data_mut()[..10] {
            *v = 60.0;
        }
        let (out, _) = synth_right(&img, &logits, &levels).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
