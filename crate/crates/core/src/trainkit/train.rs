use std::path::Path;

use gradcore::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{
    augment, center_crop, AdamState, InitMode, MaskMode, Objective, StepOutcome, TrainConfig,
};
use crate::checkpoint::{save_checkpoint, Checkpoint, TrainingState};
use crate::error::{invalid, io_err, Error, Result};
use crate::falnet::FalNet;
use crate::losses::{FeatureExtractor, LossValues, RandomConvPyramid, TrainStep};
use crate::scenes::StereoSample;

pub const LOG_FILE: &str = "train_log.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const BEST_DIR: &str = "best";
pub const FINAL_DIR: &str = "final";

/// One row of the training log: means over the epoch's iterations.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Iterations completed so far, across epochs.
    pub iteration: u64,
    pub lr: f64,
    pub reconstruction: f64,
    pub mirror: f64,
    pub smoothness: f64,
    pub total: f64,
    pub mask_left: f64,
    pub mask_right: f64,
    pub skipped: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: FalNet<f32>,
    pub history: Vec<EpochRecord>,
    /// Objective on the centre-cropped training set before the first update.
    pub initial: LossValues,
    /// The same after the last epoch.
    pub last: LossValues,
    pub best_epoch: usize,
    pub skipped_steps: u64,
}

fn mix_seed(seed: u64, parts: &[u64]) -> u64 {
    let mut z = seed;
    for &p in parts {
        z = z
            .wrapping_add(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(p.wrapping_mul(0xd6e8_feb8_6659_fd93));
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

fn stack(samples: &[StereoSample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let left: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.left).collect();
    let right: Vec<&Tensor<f32>> = samples.iter().map(|s| &s.right).collect();
    Ok((Tensor::cat_batch(&left)?, Tensor::cat_batch(&right)?))
}

/// Objective averaged over `samples`, centre-cropped to `crop`, in batches
/// of `pairs`.
pub fn dataset_loss(
    objective: &Objective<'_>,
    model: &FalNet<f32>,
    samples: &[StereoSample],
    crop: [usize; 2],
    pairs: usize,
) -> Result<LossValues> {
    if samples.is_empty() {
        return Err(invalid("dataset_loss", "no samples"));
    }
    let mut acc = LossValues::default();
    for chunk in samples.chunks(pairs.max(1)) {
        let cropped: Vec<StereoSample> = chunk
            .iter()
            .map(|s| center_crop(s, crop))
            .collect::<Result<_>>()?;
        let (l, r) = stack(&cropped)?;
        let (v, _) = objective.evaluate(model, &l, &r)?;
        let wgt = chunk.len() as f64 / samples.len() as f64;
        acc.reconstruction += wgt * v.reconstruction;
        acc.mirror += wgt * v.mirror;
        acc.smoothness += wgt * v.smoothness;
        acc.total += wgt * v.total;
    }
    Ok(acc)
}

fn write_log(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Run `cfg.epochs` epochs from `start`. Step 2 draws mirrored targets and,
/// with [`MaskMode::Mom`], occlusion masks from `fixed`. With `out`, the
/// config, the per-epoch CSV log and the best and final checkpoints are
/// written there.
pub fn train(
    cfg: &TrainConfig,
    samples: &[StereoSample],
    start: FalNet<f32>,
    fixed: Option<&FalNet<f32>>,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if start.config() != &cfg.network {
        return Err(invalid(
            "train",
            "the initial network does not match the configured network",
        ));
    }
    let pairs = cfg.pairs_per_batch();
    if samples.len() < pairs {
        return Err(invalid(
            "train",
            format!(
                "{} training pairs cannot fill a batch of {pairs} pairs",
                samples.len()
            ),
        ));
    }
    let fixed = match (cfg.step, cfg.masks) {
        (TrainStep::One, _) | (TrainStep::Two, MaskMode::Ones) => None,
        (TrainStep::Two, MaskMode::Mom) => Some(fixed.ok_or_else(|| {
            invalid("train", "step 2 with occlusion masks needs a fixed network")
        })?),
    };
    let levels = cfg.levels.build()?;
    let pyramid = RandomConvPyramid::<f32>::default();
    let features: Option<&dyn FeatureExtractor<f32>> = if cfg.loss.alpha_p != 0.0 {
        Some(&pyramid)
    } else {
        None
    };
    let objective = Objective {
        levels: &levels,
        weights: &cfg.loss,
        masks: cfg.masks,
        fixed,
        features,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let p = dir.join(CONFIG_FILE);
        std::fs::write(&p, cfg.to_toml()?).map_err(io_err(&p))?;
    }

    let mut model = start;
    let initial = dataset_loss(&objective, &model, samples, cfg.augment.crop, pairs)?;
    let shapes: Vec<Vec<usize>> = model
        .params()
        .iter()
        .map(|p| p.value.shape().to_vec())
        .collect();
    let mut adam = AdamState::<f32>::new(shapes.iter().map(Vec::as_slice));
    let per_epoch = (samples.len() / pairs)
        .min(cfg.iterations_per_epoch.unwrap_or(usize::MAX))
        .max(1);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut iteration = 0u64;
    let mut best = (f64::INFINITY, 0usize);
    let step_tag: u8 = cfg.step.into();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr.at(epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
            cfg.seed,
            &[1, epoch as u64],
        )));
        let mut sums = [0f64; 6];
        for it in 0..per_epoch {
            let batch: Vec<StereoSample> = order[it * pairs..(it + 1) * pairs]
                .iter()
                .enumerate()
                .map(|(slot, &i)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                        cfg.seed,
                        &[2, epoch as u64, it as u64, slot as u64],
                    ));
                    augment(&samples[i], &cfg.augment, &mut rng)
                })
                .collect::<Result<_>>()?;
            let (l, r) = stack(&batch)?;
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let parts = objective.build_on(&mut tape, &model, &bound, &l, &r)?;
            let values = parts.values(&tape);
            if !values.total.is_finite() {
                log::error!("non-finite loss at epoch {epoch}, iteration {it}: {values:?}");
                return Err(Error::Diverged {
                    epoch,
                    iteration: it,
                    msg: format!("{values:?}"),
                });
            }
            let grads = tape.backward(parts.total)?;
            let zero: Vec<Tensor<f32>> = shapes.iter().map(|s| Tensor::zeros(s.clone())).collect();
            let grad_refs: Vec<&Tensor<f32>> = bound
                .iter()
                .zip(&zero)
                .map(|(&v, z)| grads.get(v).unwrap_or(z))
                .collect();
            let mut params: Vec<&mut Tensor<f32>> = model
                .params_mut()
                .iter_mut()
                .map(|p| &mut p.value)
                .collect();
            if adam.step(&mut params, &grad_refs, lr) == StepOutcome::SkippedNonFinite {
                log::warn!(
                    "epoch {epoch}, iteration {it}: skipped update with non-finite gradients"
                );
            }
            iteration += 1;
            for (s, v) in sums.iter_mut().zip([
                values.reconstruction,
                values.mirror,
                values.smoothness,
                values.total,
                parts.mask_left.coverage(),
                parts.mask_right.coverage(),
            ]) {
                *s += v;
            }
        }
        let n = per_epoch as f64;
        let record = EpochRecord {
            epoch,
            iteration,
            lr,
            reconstruction: sums[0] / n,
            mirror: sums[1] / n,
            smoothness: sums[2] / n,
            total: sums[3] / n,
            mask_left: sums[4] / n,
            mask_right: sums[5] / n,
            skipped: adam.skipped(),
        };
        log::info!(
            "epoch {epoch}: total {:.6} rec {:.6} mirror {:.6} smooth {:.6} masks {:.3}/{:.3} lr {lr:e}",
            record.total,
            record.reconstruction,
            record.mirror,
            record.smoothness,
            record.mask_left,
            record.mask_right
        );
        let improved = record.total < best.0;
        if improved {
            best = (record.total, epoch);
        }
        history.push(record);
        if let Some(dir) = out {
            write_log(&dir.join(LOG_FILE), &history)?;
            if improved {
                save(
                    dir.join(BEST_DIR).as_path(),
                    &model,
                    cfg,
                    step_tag,
                    epoch + 1,
                    iteration,
                )?;
            }
        }
    }
    if let Some(dir) = out {
        save(
            dir.join(FINAL_DIR).as_path(),
            &model,
            cfg,
            step_tag,
            cfg.epochs,
            iteration,
        )?;
    }
    let last = dataset_loss(&objective, &model, samples, cfg.augment.crop, pairs)?;
    Ok(TrainOutcome {
        model,
        history,
        initial,
        last,
        best_epoch: best.1,
        skipped_steps: adam.skipped(),
    })
}

fn save(
    dir: &Path,
    model: &FalNet<f32>,
    cfg: &TrainConfig,
    step: u8,
    epoch: usize,
    iteration: u64,
) -> Result<()> {
    save_checkpoint(
        &Checkpoint {
            model: model.clone(),
            levels: cfg.levels.clone(),
            training: TrainingState {
                seed: cfg.seed,
                train_step: step,
                epoch: epoch as u64,
                iteration,
            },
        },
        dir,
    )
}

/// View-synthesis training from freshly initialized weights.
pub fn train_step1(
    cfg: &TrainConfig,
    samples: &[StereoSample],
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    if cfg.step != TrainStep::One {
        return Err(invalid("train_step1", "config is not a step-1 config"));
    }
    let model = FalNet::new(cfg.network.clone(), cfg.seed)?;
    train(cfg, samples, model, None, out)
}

/// Depth fine-tuning against a fixed step-1 network, starting either from
/// that network or from fresh weights.
pub fn train_step2_mom(
    cfg: &TrainConfig,
    samples: &[StereoSample],
    fixed: &Checkpoint,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    if cfg.step != TrainStep::Two {
        return Err(invalid("train_step2_mom", "config is not a step-2 config"));
    }
    if fixed.model.config() != &cfg.network || fixed.levels != cfg.levels {
        return Err(invalid(
            "train_step2_mom",
            "the fixed checkpoint's network or levels differ from the config",
        ));
    }
    let start = match cfg.init {
        InitMode::FineTune => fixed.model.clone(),
        InitMode::Scratch => FalNet::new(cfg.network.clone(), cfg.seed)?,
    };
    train(cfg, samples, start, Some(&fixed.model), out)
}
