//! Depth error metrics and test-time post-processing.

use std::fmt;
use std::io::Write;
use std::path::Path;

use gradcore::kernels::{flip_w, resize_bilinear};
use gradcore::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Result};
use crate::falnet::FalNet;
use crate::medvol::{disparity_from_volume, MedVolume, View};
use crate::quantize::{disparity_to_depth, DisparityLevels};
use crate::scenes::StereoSample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scaling {
    None,
    /// Multiply predictions by `median(gt) / median(pred)` per image.
    Median,
}

impl fmt::Display for Scaling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scaling::None => "none",
            Scaling::Median => "median",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub pixels: usize,
    pub cap: f64,
    pub scaling: Scaling,
}

pub const CSV_HEADER: [&str; 10] = [
    "abs_rel", "sq_rel", "rmse", "rmse_log", "a1", "a2", "a3", "pixels", "cap", "scaling",
];

impl EvalReport {
    pub fn csv_record(&self) -> Vec<String> {
        let mut r: Vec<String> = [
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.a1,
            self.a2,
            self.a3,
        ]
        .iter()
        .map(|v| format!("{v:.6}"))
        .collect();
        r.push(self.pixels.to_string());
        r.push(format!("{}", self.cap));
        r.push(self.scaling.to_string());
        r
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(io_err(path))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(CSV_HEADER)?;
        w.write_record(self.csv_record())?;
        w.flush().map_err(io_err(path))?;
        Ok(())
    }

    /// Metrics averaged over per-image reports; pixel counts are summed.
    pub fn mean(reports: &[EvalReport]) -> Result<EvalReport> {
        let first = reports
            .first()
            .ok_or_else(|| invalid("EvalReport::mean", "no reports"))?;
        let n = reports.len() as f64;
        let avg = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Ok(EvalReport {
            abs_rel: avg(|r| r.abs_rel),
            sq_rel: avg(|r| r.sq_rel),
            rmse: avg(|r| r.rmse),
            rmse_log: avg(|r| r.rmse_log),
            a1: avg(|r| r.a1),
            a2: avg(|r| r.a2),
            a3: avg(|r| r.a3),
            pixels: reports.iter().map(|r| r.pixels).sum(),
            cap: first.cap,
            scaling: first.scaling,
        })
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>9} {:>9} {:>9} {:>9} {:>7} {:>7} {:>7}",
            "abs_rel", "sq_rel", "rmse", "rmse_log", "a1", "a2", "a3"
        )?;
        writeln!(
            f,
            "{:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>7.4} {:>7.4} {:>7.4}",
            self.abs_rel, self.sq_rel, self.rmse, self.rmse_log, self.a1, self.a2, self.a3
        )?;
        write!(
            f,
            "({} pixels, cap {}, scaling {})",
            self.pixels, self.cap, self.scaling
        )
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Compare depths over pixels that are valid and have `0 < gt <= cap`.
/// Predictions are clamped to `[cap·1e-3, cap]` after optional scaling.
pub fn evaluate(
    pred: &[f64],
    gt: &[f64],
    valid: Option<&[bool]>,
    cap: f64,
    scaling: Scaling,
) -> Result<EvalReport> {
    if pred.len() != gt.len() || valid.is_some_and(|v| v.len() != gt.len()) {
        return Err(invalid(
            "evaluate",
            "prediction, ground truth and mask differ in length",
        ));
    }
    if !(cap > 0.0) {
        return Err(invalid("evaluate", "cap must be positive"));
    }
    let keep: Vec<usize> = (0..gt.len())
        .filter(|&i| valid.is_none_or(|v| v[i]) && gt[i] > 0.0 && gt[i] <= cap)
        .collect();
    if keep.is_empty() {
        return Err(invalid("evaluate", "no valid pixels"));
    }
    let g: Vec<f64> = keep.iter().map(|&i| gt[i]).collect();
    let mut p: Vec<f64> = keep.iter().map(|&i| pred[i]).collect();
    if scaling == Scaling::Median {
        let ratio = median(&mut g.clone()) / median(&mut p.clone());
        p.iter_mut().for_each(|v| *v *= ratio);
    }
    let floor = cap * 1e-3;
    p.iter_mut().for_each(|v| *v = v.clamp(floor, cap));
    let n = g.len() as f64;
    let (mut abs_rel, mut sq_rel, mut se, mut sle) = (0.0, 0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    for (&p, &g) in p.iter().zip(&g) {
        let d = p - g;
        abs_rel += d.abs() / g;
        sq_rel += d * d / g;
        se += d * d;
        let dl = p.ln() - g.ln();
        sle += dl * dl;
        let ratio = (p / g).max(g / p);
        for (i, h) in hits.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(i as i32 + 1) {
                *h += 1;
            }
        }
    }
    Ok(EvalReport {
        abs_rel: abs_rel / n,
        sq_rel: sq_rel / n,
        rmse: (se / n).sqrt(),
        rmse_log: (sle / n).sqrt(),
        a1: hits[0] as f64 / n,
        a2: hits[1] as f64 / n,
        a3: hits[2] as f64 / n,
        pixels: keep.len(),
        cap,
        scaling,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PostProcess {
    None,
    /// Blend the direct prediction with the mirrored one, using each only
    /// near the border where it has no occlusion artifacts.
    Flip,
    /// [`PostProcess::Flip`] averaged over input scales 0.75, 1 and 1.25.
    MultiscaleFlip,
}

impl std::str::FromStr for PostProcess {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(PostProcess::None),
            "flip" => Ok(PostProcess::Flip),
            "multiscale-flip" => Ok(PostProcess::MultiscaleFlip),
            other => Err(format!(
                "unknown post-processing `{other}` (none, flip, multiscale-flip)"
            )),
        }
    }
}

pub const MULTISCALE_FACTORS: [f64; 3] = [0.75, 1.0, 1.25];

/// Left-aligned disparity for a left image, `[B, 1, H, W]`.
pub fn predict_disparity(
    model: &FalNet<f32>,
    levels: &DisparityLevels,
    image: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    let logits = model.forward(image)?;
    disparity_from_volume(&MedVolume::from_logits(
        &logits,
        levels,
        View::Left,
        View::Left,
    )?)
}

/// Weights of the direct prediction (`direct`) across the width; the
/// mirrored prediction gets `1 - direct` at the borders and both get an
/// equal share in between.
fn border_ramps(w: usize) -> (Vec<f32>, Vec<f32>) {
    let left_band: Vec<f32> = (0..w)
        .map(|i| {
            let x = if w > 1 {
                i as f64 / (w - 1) as f64
            } else {
                0.0
            };
            (1.0 - (20.0 * (x - 0.05)).clamp(0.0, 1.0)) as f32
        })
        .collect();
    let right_band: Vec<f32> = left_band.iter().rev().copied().collect();
    (left_band, right_band)
}

fn flip_blend(direct: &Tensor<f32>, mirrored: &Tensor<f32>) -> Result<Tensor<f32>> {
    let [_, _, _, w] = direct.dims4()?;
    let (left_band, right_band) = border_ramps(w);
    let mut out = direct.clone();
    for (row, (d_row, m_row)) in out.data_mut().chunks_exact_mut(w).zip(
        direct
            .data()
            .chunks_exact(w)
            .zip(mirrored.data().chunks_exact(w)),
    ) {
        for x in 0..w {
            let (l, r) = (left_band[x], right_band[x]);
            let mean = 0.5 * (d_row[x] + m_row[x]);
            row[x] = r * d_row[x] + l * m_row[x] + (1.0 - l - r) * mean;
        }
    }
    Ok(out)
}

fn flip_pp(
    model: &FalNet<f32>,
    levels: &DisparityLevels,
    image: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    let direct = predict_disparity(model, levels, image)?;
    let mirrored = flip_w(&predict_disparity(model, levels, &flip_w(image)?)?)?;
    flip_blend(&direct, &mirrored)
}

pub fn postprocess(
    model: &FalNet<f32>,
    levels: &DisparityLevels,
    image: &Tensor<f32>,
    mode: PostProcess,
) -> Result<Tensor<f32>> {
    match mode {
        PostProcess::None => predict_disparity(model, levels, image),
        PostProcess::Flip => flip_pp(model, levels, image),
        PostProcess::MultiscaleFlip => {
            let [_, _, h, w] = image.dims4()?;
            let m = model.config().input_multiple();
            let mut acc: Option<Tensor<f32>> = None;
            let mut used = 0usize;
            for s in MULTISCALE_FACTORS {
                let (sh, sw) = (
                    (h as f64 * s).round() as usize,
                    (w as f64 * s).round() as usize,
                );
                if sh % m != 0 || sw % m != 0 || sh == 0 || sw == 0 {
                    log::warn!("multiscale post-processing: skipping scale {s} ({sh}x{sw} not divisible by {m})");
                    continue;
                }
                let scaled = if (sh, sw) == (h, w) {
                    image.clone()
                } else {
                    resize_bilinear(image, sh, sw)?
                };
                let d = flip_pp(model, levels, &scaled)?;
                let back = if (sh, sw) == (h, w) {
                    d
                } else {
                    resize_bilinear(&d, h, w)?
                };
                let inv = (w as f64 / sw as f64) as f32;
                let back = back.map(|v| v * inv);
                acc = Some(match acc {
                    None => back,
                    Some(a) => a.zip_map(&back, "multiscale", |x, y| x + y)?,
                });
                used += 1;
            }
            let acc = acc.ok_or_else(|| {
                invalid(
                    "postprocess",
                    "no usable scale for multiscale post-processing",
                )
            })?;
            let k = used as f32;
            Ok(acc.map(|v| v / k))
        }
    }
}

/// Mean per-image report of predicted left disparities against ground truth.
pub fn evaluate_disparities(
    preds: &[Tensor<f32>],
    samples: &[StereoSample],
    floor: f64,
    scaling: Scaling,
) -> Result<EvalReport> {
    if preds.len() != samples.len() {
        return Err(invalid(
            "evaluate_disparities",
            "prediction and sample counts differ",
        ));
    }
    let mut reports = Vec::with_capacity(samples.len());
    for (pred, s) in preds.iter().zip(samples) {
        let gt = s.disparity_left.as_ref().ok_or_else(|| {
            invalid(
                "evaluate_disparities",
                "sample has no ground-truth disparity",
            )
        })?;
        if pred.shape() != gt.shape() {
            return Err(invalid(
                "evaluate_disparities",
                format!(
                    "prediction {:?} vs ground truth {:?}",
                    pred.shape(),
                    gt.shape()
                ),
            ));
        }
        let cam = &s.camera;
        let pd: Vec<f64> = disparity_to_depth(pred, cam, floor)
            .data()
            .iter()
            .map(|&v| v as f64)
            .collect();
        let gd: Vec<f64> = gt
            .data()
            .iter()
            .map(|&d| {
                if d > 0.0 {
                    cam.baseline_times_focal / d as f64
                } else {
                    0.0
                }
            })
            .collect();
        reports.push(evaluate(&pd, &gd, None, cam.depth_cap, scaling)?);
    }
    EvalReport::mean(&reports)
}

/// Run `model` on every left image and evaluate.
pub fn evaluate_model(
    model: &FalNet<f32>,
    levels: &DisparityLevels,
    samples: &[StereoSample],
    mode: PostProcess,
    scaling: Scaling,
) -> Result<EvalReport> {
    let preds = samples
        .iter()
        .map(|s| postprocess(model, levels, &s.left, mode))
        .collect::<Result<Vec<_>>>()?;
    evaluate_disparities(&preds, samples, levels.disparity_floor(), scaling)
}

/// `10·log10(1/MSE)` between two `[B, C, H, W]` images in `[0, 1]`, over
/// the pixels where `mask` (`B·H·W`, shared by all channels) is set.
/// Infinite for identical images.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>, mask: Option<&[bool]>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(invalid(
            "psnr",
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    let [bs, c, h, w] = a.dims4()?;
    let plane = h * w;
    if let Some(m) = mask {
        if m.len() != bs * plane {
            return Err(invalid(
                "psnr",
                format!("mask has {} entries, expected {}", m.len(), bs * plane),
            ));
        }
    }
    let (mut sum, mut count) = (0.0f64, 0usize);
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        let (bi, p) = (i / (c * plane), i % plane);
        if mask.is_none_or(|m| m[bi * plane + p]) {
            let d = *x as f64 - *y as f64;
            sum += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(invalid("psnr", "empty mask"));
    }
    let mse = sum / count as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

/// Print a report table followed by its CSV record.
pub fn print_report(out: &mut impl Write, report: &EvalReport) -> std::io::Result<()> {
    writeln!(out, "{report}")?;
    writeln!(out, "{}", CSV_HEADER.join(","))?;
    writeln!(out, "{}", report.csv_record().join(","))
}
