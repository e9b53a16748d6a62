//! Training objectives. All reductions are means over every pixel; masks
//! act as per-pixel weights and never renormalize.

use gradcore::kernels::{grad_x, grad_y};
use gradcore::{Real, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::medvol::View;
use crate::mom::{MirroredDisparity, OcclusionMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum TrainStep {
    /// View synthesis with all-visible masks and no mirror terms.
    One,
    /// Depth fine-tuning with occlusion masks and mirror supervision.
    Two,
}

impl TryFrom<u8> for TrainStep {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(TrainStep::One),
            2 => Ok(TrainStep::Two),
            other => Err(format!("training step must be 1 or 2, got {other}")),
        }
    }
}

impl From<TrainStep> for u8 {
    fn from(s: TrainStep) -> u8 {
        match s {
            TrainStep::One => 1,
            TrainStep::Two => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha_ds: f64,
    pub alpha_p: f64,
    pub gamma: f64,
    pub step: TrainStep,
}

impl LossWeights {
    pub const PERCEPTUAL_WEIGHT: f64 = 0.01;

    pub fn step1() -> Self {
        Self {
            alpha_ds: 0.0008,
            alpha_p: 0.0,
            gamma: 2.0,
            step: TrainStep::One,
        }
    }

    pub fn step2() -> Self {
        Self {
            alpha_ds: 0.0016,
            ..Self::step1()
        }
        .with_step(TrainStep::Two)
    }

    pub fn for_step(step: TrainStep) -> Self {
        match step {
            TrainStep::One => Self::step1(),
            TrainStep::Two => Self::step2(),
        }
    }

    fn with_step(mut self, step: TrainStep) -> Self {
        self.step = step;
        self
    }

    /// Enable the feature-matching term at its default weight.
    pub fn with_perceptual(mut self) -> Self {
        self.alpha_p = Self::PERCEPTUAL_WEIGHT;
        self
    }
}

/// A frozen image-to-features mapping used by the reconstruction loss.
pub trait FeatureExtractor<F: Real> {
    /// Feature maps, one per pyramid level; parameters enter as constants.
    fn features_on(&self, tape: &mut Tape<F>, image: Var) -> Result<Vec<Var>>;
}

/// Three stride-2 random 3×3 convolutions with ELU, seeded and fixed.
#[derive(Clone, Debug)]
pub struct RandomConvPyramid<F> {
    layers: Vec<(Tensor<F>, Tensor<F>)>,
}

impl<F: Real> RandomConvPyramid<F> {
    pub fn new(seed: u64, channels: [usize; 3]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let layers = channels
            .iter()
            .map(|&cout| {
                let bound = (6.0 / (cin * 9) as f64).sqrt();
                let w = Tensor::from_fn(vec![cout, cin, 3, 3], |_| {
                    F::from_f64_lossy(rng.gen_range(-bound..=bound))
                });
                let b = Tensor::zeros(vec![cout]);
                cin = cout;
                (w, b)
            })
            .collect();
        Self { layers }
    }

    pub fn cast<G: Real>(&self) -> RandomConvPyramid<G> {
        RandomConvPyramid {
            layers: self
                .layers
                .iter()
                .map(|(w, b)| (w.cast(), b.cast()))
                .collect(),
        }
    }
}

impl<F: Real> Default for RandomConvPyramid<F> {
    fn default() -> Self {
        Self::new(0x5eed, [8, 16, 32])
    }
}

impl<F: Real> FeatureExtractor<F> for RandomConvPyramid<F> {
    fn features_on(&self, tape: &mut Tape<F>, image: Var) -> Result<Vec<Var>> {
        let mut x = image;
        let mut out = Vec::with_capacity(self.layers.len());
        for (w, b) in &self.layers {
            let w = tape.constant(w.clone());
            let b = tape.constant(b.clone());
            let y = tape.conv2d(x, w, Some(b), 2, 1)?;
            x = tape.elu(y, F::one());
            out.push(x);
        }
        Ok(out)
    }
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(invalid(op, format!("shape {a:?} does not match {b:?}")));
    }
    Ok(())
}

fn check_mask<F: Real>(op: &'static str, mask: &OcclusionMask<F>, image: &[usize]) -> Result<()> {
    let m = mask.values().shape();
    if m[0] != image[0] || m[2] != image[2] || m[3] != image[3] {
        return Err(invalid(
            op,
            format!("mask {m:?} does not fit image {image:?}"),
        ));
    }
    Ok(())
}

/// `mean|O ⊙ (I' − I)| + α_p Σ_l mean(φ_l(O⊙I' + (1−O)⊙I) − φ_l(I))²`.
pub fn reconstruction_loss_on<F: Real>(
    tape: &mut Tape<F>,
    synthesized: Var,
    target: Var,
    mask: &OcclusionMask<F>,
    features: Option<&dyn FeatureExtractor<F>>,
    alpha_p: f64,
) -> Result<Var> {
    let shape = tape.value(target).shape().to_vec();
    check_same(
        "reconstruction_loss",
        tape.value(synthesized).shape(),
        &shape,
    )?;
    check_mask("reconstruction_loss", mask, &shape)?;
    let m = tape.constant(mask.values().clone());
    let m = tape.broadcast_channels(m, shape[1])?;
    let diff = tape.sub(synthesized, target)?;
    let diff = tape.abs(diff);
    let weighted = tape.mul(m, diff)?;
    let mut loss = tape.mean(weighted);
    if let (Some(phi), true) = (features, alpha_p != 0.0) {
        let kept = tape.mul(m, synthesized)?;
        let inv = tape.rsub_scalar(F::one(), m);
        let filled = tape.mul(inv, target)?;
        let blend = tape.add(kept, filled)?;
        let fb = phi.features_on(tape, blend)?;
        let ft = phi.features_on(tape, target)?;
        for (a, b) in fb.into_iter().zip(ft) {
            let d = tape.sub(a, b)?;
            let sq = tape.square(d)?;
            let term = tape.mean(sq);
            let term = tape.mul_scalar(term, F::from_f64_lossy(alpha_p));
            loss = tape.add(loss, term)?;
        }
    }
    Ok(loss)
}

/// Edge weights `exp(−γ · mean_c |∂I_c|)` from an image-gradient tensor.
fn edge_weight<F: Real>(d: &Tensor<F>, gamma: f64) -> Result<Tensor<F>> {
    let g = F::from_f64_lossy(gamma);
    let [b, c, h, w] = d.dims4()?;
    let plane = h * w;
    let inv_c = F::one() / F::from_usize(c).unwrap();
    let mut out = Tensor::zeros(vec![b, 1, h, w]);
    for bi in 0..b {
        for ci in 0..c {
            let src = &d.data()[(bi * c + ci) * plane..(bi * c + ci + 1) * plane];
            for (o, &v) in out.data_mut()[bi * plane..(bi + 1) * plane]
                .iter_mut()
                .zip(src)
            {
                *o += v.abs() * inv_c;
            }
        }
    }
    Ok(out.map(|a| (-g * a).exp()))
}

/// `mean(|∂x D|·e^{−γ|∂x I|}) + mean(|∂y D|·e^{−γ|∂y I|})`, gradients of the
/// image averaged over channels. The image only provides weights. An axis
/// of extent 1 contributes nothing.
pub fn smoothness_loss_on<F: Real>(
    tape: &mut Tape<F>,
    disparity: Var,
    image: &Tensor<F>,
    gamma: f64,
) -> Result<Var> {
    let d = tape.value(disparity).dims4()?;
    let i = image.dims4()?;
    if d[1] != 1 {
        return Err(invalid(
            "smoothness_loss",
            format!("disparity must have 1 channel, got {}", d[1]),
        ));
    }
    if (d[0], d[2], d[3]) != (i[0], i[2], i[3]) {
        return Err(invalid(
            "smoothness_loss",
            format!("disparity {d:?} and image {i:?} differ in batch or spatial size"),
        ));
    }
    let mut total = tape.constant(Tensor::scalar(F::zero()));
    if d[3] >= 2 {
        let w = tape.constant(edge_weight(&grad_x(image)?, gamma)?);
        let g = tape.grad_x(disparity)?;
        total = add_weighted_mean(tape, total, g, w)?;
    }
    if d[2] >= 2 {
        let w = tape.constant(edge_weight(&grad_y(image)?, gamma)?);
        let g = tape.grad_y(disparity)?;
        total = add_weighted_mean(tape, total, g, w)?;
    }
    Ok(total)
}

fn add_weighted_mean<F: Real>(tape: &mut Tape<F>, acc: Var, grad: Var, weight: Var) -> Result<Var> {
    let a = tape.abs(grad);
    let t = tape.mul(a, weight)?;
    let t = tape.mean(t);
    Ok(tape.add(acc, t)?)
}

/// `mean((1 − O) ⊙ |D − D_M|) / max(D_M)`, the maximum taken per image.
pub fn mirror_loss_on<F: Real>(
    tape: &mut Tape<F>,
    disparity: Var,
    mirrored: &MirroredDisparity<F>,
    mask: &OcclusionMask<F>,
) -> Result<Var> {
    let shape = tape.value(disparity).shape().to_vec();
    check_same("mirror_loss", mirrored.values().shape(), &shape)?;
    check_same("mirror_loss", mask.values().shape(), &shape)?;
    if mirrored.view() != mask.view() {
        return Err(invalid(
            "mirror_loss",
            format!(
                "mirrored disparity is {}-aligned but the mask is for the {} view",
                mirrored.view(),
                mask.view()
            ),
        ));
    }
    let maxima = mirrored.per_image_max()?;
    if let Some(m) = maxima.iter().find(|m| !(**m > F::zero())) {
        return Err(invalid(
            "mirror_loss",
            format!("mirrored disparity maximum must be positive, got {m}"),
        ));
    }
    let per = shape[1] * shape[2] * shape[3];
    let mut w = mask.values().map(|o| F::one() - o);
    for (chunk, &m) in w.data_mut().chunks_mut(per).zip(&maxima) {
        chunk.iter_mut().for_each(|v| *v = *v / m);
    }
    let target = tape.constant(mirrored.values().clone());
    let w = tape.constant(w);
    let diff = tape.sub(disparity, target)?;
    let diff = tape.abs(diff);
    let weighted = tape.mul(w, diff)?;
    Ok(tape.mean(weighted))
}

/// Loss terms of one input view.
#[derive(Clone, Copy, Debug)]
pub struct ViewTerms {
    pub reconstruction: Var,
    /// Absent in step 1.
    pub mirror: Option<Var>,
    pub smoothness: Var,
}

/// `½(rec_L + rec_R + m_L + m_R + α_ds·ds_L + α_ds·ds_R)`.
pub fn total_loss_on<F: Real>(
    tape: &mut Tape<F>,
    left: ViewTerms,
    right: ViewTerms,
    alpha_ds: f64,
) -> Result<Var> {
    let a = F::from_f64_lossy(alpha_ds);
    let mut acc = tape.add(left.reconstruction, right.reconstruction)?;
    for m in [left.mirror, right.mirror].into_iter().flatten() {
        acc = tape.add(acc, m)?;
    }
    for s in [left.smoothness, right.smoothness] {
        let s = tape.mul_scalar(s, a);
        acc = tape.add(acc, s)?;
    }
    Ok(tape.mul_scalar(acc, F::from_f64_lossy(0.5)))
}

/// Scalar values of the loss terms, averaged over both views.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub reconstruction: f64,
    pub mirror: f64,
    pub smoothness: f64,
    pub total: f64,
}

impl LossValues {
    pub fn read<F: Real>(tape: &Tape<F>, left: ViewTerms, right: ViewTerms, total: Var) -> Self {
        let v = |x: Var| tape.value(x).data()[0].to_f64_lossy();
        let pair = |a: Var, b: Var| 0.5 * (v(a) + v(b));
        Self {
            reconstruction: pair(left.reconstruction, right.reconstruction),
            mirror: match (left.mirror, right.mirror) {
                (Some(a), Some(b)) => pair(a, b),
                _ => 0.0,
            },
            smoothness: pair(left.smoothness, right.smoothness),
            total: v(total),
        }
    }
}

/// Which mask weights a view's reconstruction: the one of the view being
/// reconstructed, i.e. the opposite of the input view.
pub fn reconstruction_view(input: View) -> View {
    input.other()
}
