use std::path::Path;
use std::process::{Command, Output};

use falnet::falnet::NetworkConfig;
use falnet::losses::{LossWeights, TrainStep};
use falnet::quantize::{LevelConfig, QuantMode};
use falnet::trainkit::{AugmentConfig, DataSource, LrSchedule, TrainConfig};

const SUBCOMMANDS: [&str; 8] = [
    "make-data",
    "train",
    "finetune-mom",
    "eval",
    "synth-view",
    "occlusion",
    "gradcheck",
    "disc-curves",
];

fn falnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_falnet"))
        .args(args)
        .arg("--log-level")
        .arg("warn")
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    )
}

fn ok(args: &[&str]) -> String {
    let o = falnet(args);
    assert_eq!(o.status.code(), Some(0), "{args:?}: {}", text(&o));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn make_data(dir: &Path, count: usize) {
    ok(&[
        "make-data",
        "--out",
        p(dir),
        "--count",
        &count.to_string(),
        "--preset",
        "two-layer",
        "--height",
        "32",
        "--width",
        "96",
    ]);
}

/// Every file below `dir`, relative path and bytes, sorted.
fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .unwrap()
                    .to_string_lossy()
                    .into_owned();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

#[test]
fn help_gives_every_flag_a_default() {
    for cmd in SUBCOMMANDS {
        let help = ok(&[cmd, "--help"]);
        let mut flags: Vec<String> = Vec::new();
        for line in help.lines() {
            let t = line.trim_start();
            if t.starts_with("--") || t.starts_with("-h") {
                flags.push(t.to_string());
            } else if let Some(last) = flags.last_mut() {
                if line.starts_with("  ") && !t.is_empty() {
                    last.push(' ');
                    last.push_str(t);
                }
            }
        }
        assert!(flags.len() > 2, "{cmd}: {help}");
        for f in flags.iter().filter(|f| !f.starts_with("-h, --help")) {
            assert!(
                f.contains("[default:") || f.contains("[possible values"),
                "{cmd}: {f}"
            );
        }
    }
}

#[test]
fn usage_errors_exit_with_one() {
    for args in [
        vec!["no-such-command"],
        vec!["disc-curves", "--no-such-flag"],
        vec!["disc-curves", "--mode", "cubic"],
        vec!["disc-curves", "--levels", "many"],
        vec!["eval", "--pp", "sideways", "--checkpoint", "x"],
        vec!["eval", "--data", "d"],
        vec!["finetune-mom", "--masks", "some"],
    ] {
        let o = falnet(&args);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", text(&o));
    }
}

#[test]
fn runtime_failures_exit_with_two_and_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let o = falnet(&["eval", "--data", p(&missing), "--checkpoint", p(&missing)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("missing"), "{}", text(&o));

    make_data(&dir.path().join("d"), 1);
    let o = falnet(&[
        "synth-view",
        "--data",
        p(&dir.path().join("d")),
        "--index",
        "5",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("--index"), "{}", text(&o));

    let o = falnet(&["gradcheck", "--op", "no-such-op", "--seeds", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("conv2d"), "{}", text(&o));
}

#[test]
fn disc_curves_writes_one_row_per_level_and_mode() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    ok(&[
        "disc-curves",
        "--levels",
        "33,49",
        "--mode",
        "exp,linear",
        "--out",
        p(&a),
    ]);
    ok(&[
        "disc-curves",
        "--levels",
        "33,49",
        "--mode",
        "exp,linear",
        "--out",
        p(&b),
    ]);
    let csv = std::fs::read_to_string(&a).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2 * (33 + 49));
    for mode in ["exp", "linear"] {
        for count in [33, 49] {
            let prefix = format!("{mode},{count},");
            assert_eq!(
                rows.iter().filter(|r| r.starts_with(&prefix)).count(),
                count
            );
        }
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn eval_of_ground_truth_predictions_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    make_data(&data, 3);
    let csv = dir.path().join("r.csv");
    ok(&[
        "eval",
        "--data",
        p(&data),
        "--predictions",
        p(&data.join("disp_left")),
        "--csv",
        p(&csv),
    ]);
    let mut r = csv::Reader::from_path(&csv).unwrap();
    let head: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    let row = r.records().next().unwrap().unwrap();
    for (k, v) in head.iter().zip(row.iter()) {
        let want = match k.as_str() {
            "abs_rel" | "sq_rel" | "rmse" | "rmse_log" => 0.0,
            "a1" | "a2" | "a3" => 1.0,
            _ => continue,
        };
        assert_eq!(v.parse::<f64>().unwrap(), want, "{k}");
    }
}

#[test]
fn make_data_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    make_data(&dir.path().join("a"), 2);
    make_data(&dir.path().join("b"), 2);
    let (a, b) = (
        snapshot(&dir.path().join("a")),
        snapshot(&dir.path().join("b")),
    );
    assert_eq!(a.len(), 2 * 5 + 2);
    assert_eq!(a, b);
}

#[test]
fn oracle_synthesis_and_occlusion_run_on_a_pair() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    make_data(&data, 2);
    let out = ok(&[
        "synth-view",
        "--data",
        p(&data),
        "--index",
        "1",
        "--out",
        p(&dir.path().join("s")),
    ]);
    assert!(out.contains("PSNR (pixels visible in both views)"), "{out}");
    assert!(dir.path().join("s/synth_right.png").exists());
    assert!(dir.path().join("s/comparison.png").exists());
    let out = ok(&[
        "occlusion",
        "--data",
        p(&data),
        "--index",
        "1",
        "--out",
        p(&dir.path().join("o")),
    ]);
    assert!(out.contains("IoU"), "{out}");
    assert!(dir.path().join("o/occlusion_left.png").exists());
    assert!(dir.path().join("o/occlusion_right.png").exists());
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck", "--seeds", "2"]);
    assert!(!out.contains("FAIL"), "{out}");
    assert_eq!(out.lines().count(), 1 + falnet::gradsuite::OPS.len());
}

fn tiny_config(step: TrainStep, data: &Path) -> TrainConfig {
    let levels = LevelConfig {
        count: 5,
        d_min: 1.0,
        d_max: 16.0,
        mode: QuantMode::Exponential,
    };
    let mut cfg = TrainConfig::desk(step);
    cfg.epochs = 2;
    cfg.batch_size = 2;
    cfg.iterations_per_epoch = Some(2);
    cfg.lr = LrSchedule {
        initial: 1e-3,
        halve_at: vec![1],
    };
    cfg.augment = AugmentConfig::identity([32, 96]);
    cfg.loss = LossWeights::for_step(step);
    cfg.network = NetworkConfig::toy(levels.count);
    cfg.levels = levels;
    cfg.data = DataSource::Dataset {
        root: data.to_path_buf(),
        split: None,
    };
    cfg
}

#[test]
fn training_commands_are_repeatable_and_feed_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    make_data(&data, 3);
    for step in [TrainStep::One, TrainStep::Two] {
        let name = if step == TrainStep::One {
            "one.toml"
        } else {
            "two.toml"
        };
        std::fs::write(d.join(name), tiny_config(step, &data).to_toml().unwrap()).unwrap();
    }
    for run in ["a", "b"] {
        ok(&[
            "train",
            "--config",
            p(&d.join("one.toml")),
            "--out",
            p(&d.join(run)),
        ]);
    }
    assert_eq!(snapshot(&d.join("a")), snapshot(&d.join("b")));
    let log = std::fs::read_to_string(d.join("a/train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let out = ok(&[
        "finetune-mom",
        "--config",
        p(&d.join("two.toml")),
        "--fixed",
        p(&d.join("a/final")),
        "--out",
        p(&d.join("m")),
        "--epochs",
        "1",
    ]);
    assert!(out.contains("final mask coverage"), "{out}");
    ok(&[
        "finetune-mom",
        "--config",
        p(&d.join("two.toml")),
        "--fixed",
        p(&d.join("a/final")),
        "--out",
        p(&d.join("n")),
        "--epochs",
        "1",
        "--masks",
        "ones",
    ]);
    assert_ne!(snapshot(&d.join("m")), snapshot(&d.join("n")));

    let out = ok(&[
        "eval",
        "--data",
        p(&data),
        "--checkpoint",
        p(&d.join("m/final")),
        "--pp",
        "flip",
    ]);
    assert!(out.contains("abs_rel"), "{out}");

    let o = falnet(&[
        "finetune-mom",
        "--config",
        p(&d.join("one.toml")),
        "--fixed",
        p(&d.join("a/final")),
        "--out",
        p(&d.join("x")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
}
