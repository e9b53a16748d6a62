//! Finite-difference checks of every differentiable operation, in `f64`.

use gradcore::{check_gradients, GradCheckOptions, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::falnet::{FalNet, NetworkConfig};
use crate::losses::{
    mirror_loss_on, reconstruction_loss_on, smoothness_loss_on, RandomConvPyramid,
};
use crate::medvol::{
    cross_volume_on, disparity_on, own_volume_on, synth_right_on, view_pass_on, View,
};
use crate::mom::{MirroredDisparity, OcclusionMask};
use crate::quantize::{make_levels, DisparityLevels, QuantMode};
use crate::warp::{shift_sample_on, warp_volume_on, WarpDirection};

/// Default acceptance threshold on the relative error.
pub const TOLERANCE: f64 = 1e-4;

pub const OPS: &[&str] = &[
    "conv2d",
    "softmax",
    "shift-sample",
    "warp-volume",
    "cross-volume",
    "expected-disparity",
    "synthesis",
    "reconstruction-loss",
    "smoothness-loss",
    "mirror-loss",
    "network",
    "network-synthesis",
];

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub name: &'static str,
    pub seeds: usize,
    pub checked: usize,
    pub max_rel_error: f64,
}

impl OpReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

type Inputs = Vec<Tensor<f64>>;
type Build<'a> = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a>;

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::rand_uniform(shape.to_vec(), lo, hi, rng)
}

fn levels(count: usize) -> DisparityLevels {
    make_levels(count, 0.75, 5.5, QuantMode::Exponential).expect("valid levels")
}

fn lift(r: Result<Var>) -> gradcore::Result<Var> {
    r.map_err(|e| TensorError::InvalidArgument {
        op: "gradsuite",
        msg: e.to_string(),
    })
}

const IMG: [usize; 4] = [2, 3, 5, 9];
const DISP: [usize; 4] = [2, 1, 5, 9];

/// Inputs, the function under test and the number of coordinates sampled
/// per input (all when `None`).
fn case(name: &str, rng: &mut ChaCha8Rng) -> Result<(Inputs, Build<'static>, Option<usize>)> {
    let lv = levels(5);
    let vol = [IMG[0], lv.len(), IMG[2], IMG[3]];
    Ok(match name {
        "conv2d" => {
            let stride = if rng.gen_bool(0.5) { 1 } else { 2 };
            (
                vec![
                    uniform(&IMG, -1.0, 1.0, rng),
                    uniform(&[4, 3, 3, 3], -0.5, 0.5, rng),
                    uniform(&[4], -0.5, 0.5, rng),
                ],
                Box::new(move |t, v| Ok(t.conv2d(v[0], v[1], Some(v[2]), stride, 1)?)),
                None,
            )
        }
        "softmax" => (
            vec![uniform(&vol, -3.0, 3.0, rng)],
            Box::new(|t, v| Ok(t.softmax_channels(v[0])?)),
            None,
        ),
        "shift-sample" => {
            let d = rng.gen_range(0.1..4.0);
            let dir = if rng.gen_bool(0.5) {
                WarpDirection::LtoR
            } else {
                WarpDirection::RtoL
            };
            (
                vec![uniform(&IMG, 0.0, 1.0, rng)],
                Box::new(move |t, v| shift_sample_on(t, v[0], d, dir)),
                None,
            )
        }
        "warp-volume" => {
            let dir = if rng.gen_bool(0.5) {
                WarpDirection::LtoR
            } else {
                WarpDirection::RtoL
            };
            (
                vec![uniform(&vol, 0.0, 1.0, rng)],
                Box::new(move |t, v| warp_volume_on(t, v[0], &lv, dir)),
                None,
            )
        }
        "cross-volume" => {
            let source = if rng.gen_bool(0.5) {
                View::Left
            } else {
                View::Right
            };
            (
                vec![uniform(&vol, -2.0, 2.0, rng)],
                Box::new(move |t, v| Ok(cross_volume_on(t, v[0], &lv, source)?.var)),
                None,
            )
        }
        "expected-disparity" => (
            vec![uniform(&vol, -2.0, 2.0, rng)],
            Box::new(move |t, v| {
                let own = own_volume_on(t, v[0], View::Left)?;
                disparity_on(t, own, &lv)
            }),
            None,
        ),
        "synthesis" => (
            vec![uniform(&IMG, 0.0, 1.0, rng), uniform(&vol, -2.0, 2.0, rng)],
            Box::new(move |t, v| Ok(synth_right_on(t, v[0], v[1], &lv)?.0)),
            None,
        ),
        "reconstruction-loss" => {
            let mask = OcclusionMask::new(uniform(&[2, 1, 8, 12], 0.0, 1.0, rng), View::Right)?;
            let alpha_p = if rng.gen_bool(0.5) { 0.0 } else { 0.01 };
            let phi = RandomConvPyramid::<f64>::new(rng.gen(), [4, 4, 4]);
            (
                vec![
                    uniform(&[2, 3, 8, 12], 0.0, 1.0, rng),
                    uniform(&[2, 3, 8, 12], 0.0, 1.0, rng),
                ],
                Box::new(move |t, v| {
                    reconstruction_loss_on(t, v[0], v[1], &mask, Some(&phi), alpha_p)
                }),
                None,
            )
        }
        "smoothness-loss" => {
            let image = uniform(&IMG, 0.0, 1.0, rng);
            (
                vec![uniform(&DISP, 0.5, 6.0, rng)],
                Box::new(move |t, v| smoothness_loss_on(t, v[0], &image, 2.0)),
                None,
            )
        }
        "mirror-loss" => {
            let view = if rng.gen_bool(0.5) {
                View::Left
            } else {
                View::Right
            };
            let mask = OcclusionMask::new(uniform(&DISP, 0.0, 1.0, rng), view)?;
            let target = MirroredDisparity::from_values(uniform(&DISP, 0.5, 6.0, rng), view)?;
            (
                vec![uniform(&DISP, 0.5, 6.0, rng)],
                Box::new(move |t, v| mirror_loss_on(t, v[0], &target, &mask)),
                None,
            )
        }
        "network" | "network-synthesis" => {
            let lv = levels(5);
            let cfg = NetworkConfig::toy(lv.len());
            let net = FalNet::<f64>::new(cfg, rng.gen())?;
            let shape = [1, 3, 8, 16];
            let mut inputs = vec![uniform(&shape, 0.0, 1.0, rng)];
            inputs.extend(net.params().iter().map(|p| p.value.clone()));
            if name == "network" {
                (
                    inputs,
                    Box::new(move |t, v| net.forward_on(t, &v[1..], v[0])),
                    Some(6),
                )
            } else {
                (
                    inputs,
                    Box::new(move |t, v| {
                        let logits = net.forward_on(t, &v[1..], v[0])?;
                        let pass = view_pass_on(t, v[0], logits, &lv, View::Left)?;
                        Ok(t.concat_channels(&[pass.synthesized, pass.disparity])?)
                    }),
                    Some(6),
                )
            }
        }
        other => {
            return Err(invalid(
                "gradsuite",
                format!("unknown operation {other:?}; known: {}", OPS.join(", ")),
            ))
        }
    })
}

/// Check `name` over `seeds` random instances.
pub fn run_op(name: &str, seeds: usize) -> Result<OpReport> {
    let canonical = OPS.iter().copied().find(|o| *o == name).ok_or_else(|| {
        invalid(
            "gradsuite",
            format!("unknown operation {name:?}; known: {}", OPS.join(", ")),
        )
    })?;
    let mut report = OpReport {
        name: canonical,
        seeds,
        checked: 0,
        max_rel_error: 0.0,
    };
    for seed in 0..seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x9c_0000 + seed);
        let (inputs, build, max_coords) = case(canonical, &mut rng)?;
        // Smaller steps keep the probes of deep compositions from straddling
        // the curvature jump of ELU at zero.
        let eps = if canonical.starts_with("network") {
            1e-5
        } else {
            1e-4
        };
        let opts = GradCheckOptions {
            eps,
            max_coords,
            seed,
            ..Default::default()
        };
        let r = check_gradients(&inputs, |t, v| lift(build(t, v)), &opts)?;
        report.checked += r.checked;
        report.max_rel_error = report.max_rel_error.max(r.max_rel_error);
    }
    Ok(report)
}

/// Every operation in [`OPS`], or those whose name contains `filter`.
pub fn run_suite(seeds: usize, filter: Option<&str>) -> Result<Vec<OpReport>> {
    OPS.iter()
        .filter(|o| filter.is_none_or(|f| o.contains(f)))
        .map(|o| run_op(o, seeds))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_op_lists_known_ones() {
        let err = run_op("nope", 1).unwrap_err().to_string();
        assert!(err.contains("conv2d"));
    }

    #[test]
    fn single_seed_of_each_cheap_op_passes() {
        for op in OPS.iter().filter(|o| !o.starts_with("network")) {
            let r = run_op(op, 1).unwrap();
            assert!(r.passed(TOLERANCE), "{r:?}");
        }
    }
}
