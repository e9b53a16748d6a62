use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use falnet::checkpoint::load_checkpoint;
use falnet::gradsuite;
use falnet::losses::TrainStep;
use falnet::medvol::{synth_right, View};
use falnet::metrics::{
    evaluate_disparities, evaluate_model, print_report, psnr, EvalReport, PostProcess, Scaling,
};
use falnet::mom::{occlusion_masks, MirroredVolumes, OcclusionMask};
use falnet::quantize::{
    emit_discretization_curves, make_levels, CameraModel, DisparityLevels, QuantMode,
};
use falnet::scenes::io::{load_dataset_entries, read_pfm, write_dataset, write_png};
use falnet::scenes::{iou, oracle_logits, oracle_volumes, render, SceneGenerator, StereoSample};
use falnet::trainkit::{train_step1, train_step2_mom, DataSource, InitMode, MaskMode, TrainConfig};
use falnet::{Error, Result};
use gradcore::Tensor;

/// Exponential disparity volumes for self-supervised single-image depth.
#[derive(Debug, Parser)]
#[command(name = "falnet", version)]
struct Cli {
    /// Log filter: error, warn, info, debug or trace
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic stereo dataset with ground truth
    MakeData(MakeData),
    /// Step 1: train for view synthesis
    Train(Train),
    /// Step 2: fine-tune with occlusion masks and mirrored disparities
    FinetuneMom(Finetune),
    /// Depth metrics of a checkpoint or of stored predictions
    Eval(Eval),
    /// Synthesize the right view of one pair
    SynthView(SynthView),
    /// Occlusion masks of one pair
    Occlusion(Occlusion),
    /// Finite-difference gradient checks of every differentiable operation
    Gradcheck(Gradcheck),
    /// CSV of disparity levels and their depths per quantization mode
    DiscCurves(DiscCurves),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum Preset {
    Desk,
    TwoLayer,
}

#[derive(Debug, Args)]
struct MakeData {
    /// Output folder
    #[arg(long, default_value = "data")]
    out: PathBuf,
    /// Number of pairs
    #[arg(long, default_value_t = 200)]
    count: usize,
    /// Seed of the first scene; scene i uses seed + i
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 96)]
    height: usize,
    #[arg(long, default_value_t = 320)]
    width: usize,
    /// Scene recipe
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// Generator TOML replacing the preset, height and width [default: none]
    #[arg(long)]
    generator: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Train {
    /// Training config TOML [default: desk-scale step-1 preset]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output folder for the log and checkpoints
    #[arg(long, default_value = "runs/step1")]
    out: PathBuf,
    /// Dataset folder replacing the config's data source [default: none]
    #[arg(long)]
    data: Option<PathBuf>,
    /// Number of epochs [default: from the config]
    #[arg(long)]
    epochs: Option<usize>,
    /// Run seed [default: from the config]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct Finetune {
    /// Training config TOML [default: desk-scale step-2 preset, with the
    /// network and levels of the fixed checkpoint]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Step-1 checkpoint providing mirrored disparities
    #[arg(long, default_value = "runs/step1/best")]
    fixed: PathBuf,
    /// Output folder for the log and checkpoints
    #[arg(long, default_value = "runs/step2")]
    out: PathBuf,
    /// Dataset folder replacing the config's data source [default: none]
    #[arg(long)]
    data: Option<PathBuf>,
    /// Occlusion masks: mom, or ones for the unmasked control
    #[arg(long, default_value = "mom", value_parser = ["mom", "ones"])]
    masks: String,
    /// Starting weights: fine-tune or scratch
    #[arg(long, default_value = "fine-tune", value_parser = ["fine-tune", "scratch"])]
    init: String,
    /// Number of epochs [default: from the config]
    #[arg(long)]
    epochs: Option<usize>,
    /// Run seed [default: from the config]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["checkpoint", "predictions"])))]
struct Eval {
    /// Dataset folder with ground-truth disparities
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Split file [default: <data>/split.txt]
    #[arg(long)]
    split: Option<PathBuf>,
    /// Checkpoint to evaluate [default: none]
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Folder of predicted left disparities, one PFM per pair named after
    /// the left image [default: none]
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Post-processing: none, flip or multiscale-flip
    #[arg(long, default_value = "none")]
    pp: PostProcess,
    /// Scale each prediction by the median ground-truth ratio [default: off]
    #[arg(long)]
    median_scaling: bool,
    /// Also write the report as CSV [default: none]
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PairArgs {
    /// Dataset folder
    #[arg(long, default_value = "data")]
    data: PathBuf,
    /// Pair index within the split
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Checkpoint [default: none, use ground-truth volumes]
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Logit scale of ground-truth volumes
    #[arg(long, default_value_t = 30.0)]
    sharpness: f64,
    /// Level count of ground-truth volumes
    #[arg(long, default_value_t = 65)]
    oracle_levels: usize,
}

#[derive(Debug, Args)]
struct SynthView {
    #[command(flatten)]
    pair: PairArgs,
    /// Output folder
    #[arg(long, default_value = "synth")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct Occlusion {
    #[command(flatten)]
    pair: PairArgs,
    /// Output folder
    #[arg(long, default_value = "occlusion")]
    out: PathBuf,
    /// Mask values below this count as occluded
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Debug, Args)]
struct Gradcheck {
    /// Random instances per operation
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    /// Only operations whose name contains this [default: all]
    #[arg(long)]
    op: Option<String>,
    /// Largest accepted relative error
    #[arg(long, default_value_t = gradsuite::TOLERANCE)]
    tolerance: f64,
}

#[derive(Debug, Args)]
struct DiscCurves {
    /// Comma-separated level counts
    #[arg(long, default_value = "33,49", value_delimiter = ',')]
    levels: Vec<usize>,
    /// Comma-separated modes: exp, linear, linear-depth
    #[arg(long, default_value = "exp,linear", value_delimiter = ',')]
    mode: Vec<QuantMode>,
    #[arg(long, default_value_t = 2.0)]
    d_min: f64,
    #[arg(long, default_value_t = 300.0)]
    d_max: f64,
    /// Baseline times focal length, for the depth column
    #[arg(long, default_value_t = 389.6)]
    baseline_focal: f64,
    /// Output CSV
    #[arg(long, default_value = "disc_curves.csv")]
    out: PathBuf,
}

fn config_err(what: &str, msg: impl std::fmt::Display) -> Error {
    Error::Invalid {
        op: "cli",
        msg: format!("{what}: {msg}"),
    }
}

fn make_data(a: &MakeData) -> Result<()> {
    let generator = match &a.generator {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            toml::from_str::<SceneGenerator>(&text).map_err(|e| Error::Config {
                path: p.clone(),
                msg: e.to_string(),
            })?
        }
        None => match a.preset {
            Preset::Desk => SceneGenerator::desk(a.height, a.width),
            Preset::TwoLayer => SceneGenerator::two_layer(a.height, a.width),
        },
    };
    let mut samples = Vec::with_capacity(a.count);
    for i in 0..a.count as u64 {
        let spec = generator.generate(a.seed.wrapping_add(i))?;
        samples.push((render(&spec)?, Some(spec)));
    }
    write_dataset(&a.out, &samples)?;
    println!("wrote {} pairs to {}", a.count, a.out.display());
    Ok(())
}

/// Largest crop not exceeding the image that the network accepts.
fn fit_crop(cfg: &mut TrainConfig, samples: &[StereoSample]) {
    if let Some(s) = samples.first() {
        let m = cfg.network.input_multiple();
        cfg.augment.crop = [s.height() / m * m, s.width() / m * m];
    }
}

fn prepare(
    config: &Option<PathBuf>,
    step: TrainStep,
    data: &Option<PathBuf>,
    epochs: Option<usize>,
    seed: Option<u64>,
) -> Result<(TrainConfig, Vec<StereoSample>)> {
    let mut cfg = match config {
        Some(p) => TrainConfig::from_toml_file(p)?,
        None => TrainConfig::desk(step),
    };
    if let Some(d) = data {
        cfg.data = DataSource::Dataset {
            root: d.clone(),
            split: None,
        };
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let samples = cfg.data.load()?;
    if config.is_none() {
        fit_crop(&mut cfg, &samples);
    }
    Ok((cfg, samples))
}

fn report_run(out: &Path, history_len: usize, best: usize, initial: f64, last: f64) {
    println!(
        "{history_len} epochs; reconstruction {initial:.6} -> {last:.6}; best epoch {best}; checkpoints in {}",
        out.display()
    );
}

fn train(a: &Train) -> Result<()> {
    let (cfg, samples) = prepare(&a.config, TrainStep::One, &a.data, a.epochs, a.seed)?;
    if cfg.step != TrainStep::One {
        return Err(config_err(
            "train",
            "the config is for step 2; use finetune-mom",
        ));
    }
    let o = train_step1(&cfg, &samples, Some(&a.out))?;
    report_run(
        &a.out,
        o.history.len(),
        o.best_epoch,
        o.initial.reconstruction,
        o.last.reconstruction,
    );
    Ok(())
}

fn finetune(a: &Finetune) -> Result<()> {
    let fixed = load_checkpoint(&a.fixed)?;
    let (mut cfg, samples) = prepare(&a.config, TrainStep::Two, &a.data, a.epochs, a.seed)?;
    if a.config.is_none() {
        cfg.network = fixed.model.config().clone();
        cfg.levels = fixed.levels.clone();
        fit_crop(&mut cfg, &samples);
    }
    cfg.masks = match a.masks.as_str() {
        "mom" => MaskMode::Mom,
        "ones" => MaskMode::Ones,
        other => {
            return Err(config_err(
                "--masks",
                format!("expected mom or ones, got {other}"),
            ))
        }
    };
    cfg.init = match a.init.as_str() {
        "fine-tune" => InitMode::FineTune,
        "scratch" => InitMode::Scratch,
        other => {
            return Err(config_err(
                "--init",
                format!("expected fine-tune or scratch, got {other}"),
            ))
        }
    };
    let o = train_step2_mom(&cfg, &samples, &fixed, Some(&a.out))?;
    report_run(
        &a.out,
        o.history.len(),
        o.best_epoch,
        o.initial.reconstruction,
        o.last.reconstruction,
    );
    if let Some(last) = o.history.last() {
        println!(
            "final mask coverage: left {:.4}, right {:.4}",
            last.mask_left, last.mask_right
        );
    }
    Ok(())
}

fn eval(a: &Eval) -> Result<()> {
    let pp = a.pp;
    let scaling = if a.median_scaling {
        Scaling::Median
    } else {
        Scaling::None
    };
    let entries = load_dataset_entries(&a.data, a.split.as_deref())?;
    let samples: Vec<StereoSample> = entries.iter().map(|(_, s)| s.clone()).collect();
    let report: EvalReport = match (&a.checkpoint, &a.predictions) {
        (Some(ck), _) => {
            let ck = load_checkpoint(ck)?;
            evaluate_model(&ck.model, &ck.levels.build()?, &samples, pp, scaling)?
        }
        (None, Some(dir)) => {
            let preds = entries
                .iter()
                .map(|(e, _)| {
                    let stem = e.left.file_stem().unwrap_or_default();
                    read_pfm(&dir.join(stem).with_extension("pfm"))
                })
                .collect::<Result<Vec<_>>>()?;
            evaluate_disparities(&preds, &samples, 1e-3, scaling)?
        }
        (None, None) => unreachable!("clap requires a source"),
    };
    print_report(&mut std::io::stdout(), &report).map_err(|e| Error::Io {
        path: PathBuf::from("<stdout>"),
        source: e,
    })?;
    if let Some(p) = &a.csv {
        report.write_csv(p)?;
    }
    Ok(())
}

fn load_pair(p: &PairArgs) -> Result<StereoSample> {
    let mut entries = load_dataset_entries(&p.data, None)?;
    if p.index >= entries.len() {
        return Err(config_err(
            "--index",
            format!("{} is out of range for {} pairs", p.index, entries.len()),
        ));
    }
    Ok(entries.swap_remove(p.index).1)
}

/// Level set containing every ground-truth disparity of the pair.
fn oracle_levels(s: &StereoSample, count: usize) -> Result<DisparityLevels> {
    let gt = s.disparity_left.as_ref().ok_or_else(|| {
        config_err(
            "oracle",
            "the pair has no ground-truth disparity; pass --checkpoint",
        )
    })?;
    let d_max = [Some(gt), s.disparity_right.as_ref()]
        .into_iter()
        .flatten()
        .map(|t| t.max_value() as f64)
        .fold(0.0, f64::max);
    let d_min = [Some(gt), s.disparity_right.as_ref()]
        .into_iter()
        .flatten()
        .map(|t| t.min_value() as f64)
        .fold(f64::INFINITY, f64::min);
    make_levels(
        count,
        d_min.max(1e-3),
        d_max.max(d_min + 1e-3),
        QuantMode::Exponential,
    )
}

fn write_mask(path: &Path, m: &OcclusionMask<f32>) -> Result<()> {
    write_png(path, m.values())
}

fn synth_view(a: &SynthView) -> Result<()> {
    let s = load_pair(&a.pair)?;
    let synth = match &a.pair.checkpoint {
        Some(ck) => {
            let ck = load_checkpoint(ck)?;
            let levels = ck.levels.build()?;
            let logits = ck.model.forward(&s.left)?;
            synth_right(&s.left, &logits, &levels)?.0
        }
        None => {
            let levels = oracle_levels(&s, a.pair.oracle_levels)?;
            let gt = s
                .disparity_left
                .as_ref()
                .expect("checked by oracle_levels")
                .cast::<f64>();
            let logits = oracle_logits(&gt, &levels, a.pair.sharpness)?;
            synth_right(&s.left.cast::<f64>(), &logits, &levels)?
                .0
                .cast::<f32>()
        }
    };
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    write_png(&a.out.join("synth_right.png"), &synth)?;
    let [_, c, h, w] = synth.dims4()?;
    let diff = synth.zip_map(&s.right, "synth-view", |x, y| {
        ((x - y).abs() * 4.0).min(1.0)
    })?;
    let panels = [&synth, &s.right, &diff];
    let comparison = Tensor::from_fn(vec![1, c, h, 3 * w], |i| {
        let (x, rest) = (i % (3 * w), i / (3 * w));
        let (y, ch) = (rest % h, rest / h);
        panels[x / w].at4(0, ch, y, x % w)
    });
    write_png(&a.out.join("comparison.png"), &comparison)?;
    println!("PSNR (all pixels): {:.2} dB", psnr(&synth, &s.right, None)?);
    if let Some(v) = s.visibility(View::Right) {
        let mask: Vec<bool> = v.data().iter().map(|&x| x > 0.5).collect();
        println!(
            "PSNR (pixels visible in both views): {:.2} dB",
            psnr(&synth, &s.right, Some(&mask))?
        );
    }
    println!(
        "wrote synth_right.png and comparison.png (synthesized | right | 4x difference) to {}",
        a.out.display()
    );
    Ok(())
}

fn occlusion(a: &Occlusion) -> Result<()> {
    let s = load_pair(&a.pair)?;
    let (left, right) = match &a.pair.checkpoint {
        Some(ck) => {
            let ck = load_checkpoint(ck)?;
            let levels = ck.levels.build()?;
            let ll = ck.model.volume(&s.left, &levels, View::Left)?;
            let rr = ck.model.volume(&s.right, &levels, View::Right)?;
            let (_, lr) = ck.model.forward_as_right(&s.right, &levels)?;
            let rl = falnet::medvol::MedVolume::from_logits(
                &falnet::warp::warp_volume(
                    &ck.model.forward(&s.left)?,
                    &levels,
                    View::Left.outward(),
                )?,
                &levels,
                View::Right,
                View::Left,
            )?;
            occlusion_masks(MirroredVolumes {
                left_from_left: &ll,
                left_from_right: &lr,
                right_from_right: &rr,
                right_from_left: &rl,
            })?
        }
        None => {
            let levels = oracle_levels(&s, a.pair.oracle_levels)?;
            let v = oracle_volumes(&s, &levels, a.pair.sharpness)?;
            let (l, r) = occlusion_masks(v.mirrored())?;
            (
                OcclusionMask::new(l.values().cast::<f32>(), View::Left)?,
                OcclusionMask::new(r.values().cast::<f32>(), View::Right)?,
            )
        }
    };
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    write_mask(&a.out.join("occlusion_left.png"), &left)?;
    write_mask(&a.out.join("occlusion_right.png"), &right)?;
    for (name, mask, view) in [("left", &left, View::Left), ("right", &right, View::Right)] {
        print!("{name}: coverage {:.4}", mask.coverage());
        if let Some(vis) = s.visibility(view) {
            let occluded: Vec<bool> = mask.binarize(a.threshold).iter().map(|v| !v).collect();
            let truth: Vec<bool> = vis.data().iter().map(|&v| v < 0.5).collect();
            print!(
                ", IoU of occluded pixels vs z-buffer {:.4}",
                iou(&occluded, &truth)
            );
        }
        println!();
    }
    println!(
        "wrote occlusion_left.png and occlusion_right.png to {}",
        a.out.display()
    );
    Ok(())
}

fn gradcheck(a: &Gradcheck) -> Result<bool> {
    let reports = gradsuite::run_suite(a.seeds, a.op.as_deref())?;
    if reports.is_empty() {
        return Err(config_err(
            "--op",
            format!("no operation matches; known: {}", gradsuite::OPS.join(", ")),
        ));
    }
    println!(
        "{:<22} {:>6} {:>9} {:>14}  status",
        "operation", "seeds", "coords", "max rel error"
    );
    let mut ok = true;
    for r in &reports {
        let pass = r.passed(a.tolerance);
        ok &= pass;
        println!(
            "{:<22} {:>6} {:>9} {:>14.3e}  {}",
            r.name,
            r.seeds,
            r.checked,
            r.max_rel_error,
            if pass { "ok" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn disc_curves(a: &DiscCurves) -> Result<()> {
    let cam = CameraModel::new(a.baseline_focal, f64::MAX)?;
    let mut variants = Vec::new();
    for &mode in &a.mode {
        for &l in &a.levels {
            variants.push(make_levels(l, a.d_min, a.d_max, mode)?);
        }
    }
    emit_discretization_curves(&variants, &cam, &a.out)?;
    let rows: usize = variants.iter().map(DisparityLevels::len).sum();
    println!("wrote {rows} rows to {}", a.out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::MakeData(a) => make_data(a)?,
        Command::Train(a) => train(a)?,
        Command::FinetuneMom(a) => finetune(a)?,
        Command::Eval(a) => eval(a)?,
        Command::SynthView(a) => synth_view(a)?,
        Command::Occlusion(a) => occlusion(a)?,
        Command::Gradcheck(a) => {
            if !gradcheck(a)? {
                eprintln!(
                    "error: gradcheck: some operations exceed the tolerance {:e}",
                    a.tolerance
                );
                return Ok(ExitCode::from(2));
            }
        }
        Command::DiscCurves(a) => disc_curves(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
