use std::path::Path;
use std::process::{Command, Output};

use dcign::io::{load_checkpoint, Checkpoint, DatasetReader};
use dcign::layout::Factor;
use dcign::network::NetworkConfig;
use dcign::trainer::TrainConfig;

fn dcign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcign")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = dcign(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(dcign(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(dcign(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn failures_exit_nonzero_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let out = dcign(&["serve", "--checkpoint", s(&missing)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: "));

    let out = dcign(&["train", "--out", s(&dir.path().join("x")), "--set", "learning_rate=-1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn zero_steps_writes_the_initial_network() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("init.ckpt");
    ok(&["train", "--out", s(&out), "--steps", "0", "--seed", "9", "--set", "network=tiny"]);
    let trained: Checkpoint = load_checkpoint(&out).unwrap();
    let mut config = TrainConfig {
        network: NetworkConfig::tiny(8),
        steps: 0,
        ..TrainConfig::default()
    };
    config.seed = 9;
    config.network.seed = 9;
    let fresh = Checkpoint::<f32>::initial(config.clone()).unwrap();
    assert_eq!(trained.config, config);
    assert_eq!(trained.step, 0);
    for ((na, a), (nb, b)) in trained.net.named_params().into_iter().zip(fresh.net.named_params()) {
        assert_eq!(na, nb);
        assert_eq!(a.data(), b.data(), "{na}");
    }
}

#[test]
fn generated_ratio_is_within_three_sigma() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("mix.dat");
    ok(&[
        "gen-data", "--out", s(&data), "--batches", "13000", "--ratio", "1:1:1:10", "--batch-size", "2",
        "--resolution", "4", "--seed", "3",
    ]);
    let mut counts = [0usize; 4];
    for b in DatasetReader::open(&data).unwrap() {
        let b = b.unwrap();
        counts[Factor::ALL.iter().position(|&f| f == b.active).unwrap()] += 1;
    }
    for (c, w) in counts.iter().zip([1.0f64, 1.0, 1.0, 10.0]) {
        let p = w / 13.0;
        let (mean, sd) = (13000.0 * p, (13000.0 * p * (1.0 - p)).sqrt());
        assert!((*c as f64 - mean).abs() <= 3.0 * sd, "{counts:?}");
    }
}

/// gen-data, train, eval into `dir`; returns the artifact paths.
fn pipeline(dir: &Path) -> Vec<std::path::PathBuf> {
    let train_data = dir.join("train.dat");
    let test_data = dir.join("test.dat");
    let model = dir.join("model.ckpt");
    let baseline = dir.join("baseline.ckpt");
    let reports = dir.join("reports");
    ok(&["gen-data", "--out", s(&train_data), "--batches", "30", "--resolution", "8", "--seed", "1"]);
    ok(&["gen-data", "--out", s(&test_data), "--batches", "26", "--resolution", "8", "--seed", "2"]);
    for (out, mode) in [(&model, "disentangled"), (&baseline, "baseline")] {
        ok(&[
            "train", "--data", s(&train_data), "--out", s(out), "--mode", mode, "--steps", "30", "--seed", "4",
            "--checkpoint-every", "10", "--set", "network=tiny",
        ]);
    }
    let out = ok(&[
        "eval", "--checkpoint", s(&model), "--baseline", s(&baseline), "--data", s(&test_data), "--out-dir",
        s(&reports), "--novel-sources", "2",
    ]);
    let summary = String::from_utf8(out.stdout).unwrap();
    for key in ["pearson_azimuth", "invariance_ratio", "reconstruction_mse", "novel_view_mse_baseline"] {
        assert!(summary.contains(key), "{summary}");
    }
    let mut files = vec![train_data, test_data, model.clone(), baseline, model.with_extension("ckpt.log")];
    let mut names: Vec<_> = std::fs::read_dir(&reports).unwrap().map(|e| e.unwrap().path()).collect();
    names.sort();
    files.extend(names);
    files
}

#[test]
fn identical_seeds_give_identical_artifacts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let fa = pipeline(a.path());
    let fb = pipeline(b.path());
    assert_eq!(fa.len(), fb.len());
    assert!(fa.len() >= 11, "{fa:?}");
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.file_name(), y.file_name());
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
    }
}

#[test]
fn sweep_writes_a_grid() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let img = dir.path().join("in.png");
    let out = dir.path().join("grid.png");
    ok(&["train", "--out", s(&ckpt), "--steps", "0", "--set", "network=tiny"]);
    dcign::io::write_png(&img, &dcign::scene::render(&dcign::scene::SceneParams::neutral(), 8).unwrap()).unwrap();
    ok(&[
        "sweep", "--checkpoint", s(&ckpt), "--image", s(&img), "--latent", "0", "--from", "-15", "--to", "15",
        "--steps", "6", "--columns", "3", "--out", s(&out),
    ]);
    let grid = dcign::io::read_png(&out).unwrap();
    assert_eq!(grid.shape(), &[1, 16, 24]);
}

#[test]
fn resumed_training_matches_one_run() {
    let dir = tempfile::tempdir().unwrap();
    let (full, half, resumed) = (dir.path().join("full.ckpt"), dir.path().join("half.ckpt"), dir.path().join("resumed.ckpt"));
    let common = ["--seed", "6", "--set", "network=tiny"];
    let run = |extra: &[&str]| {
        let mut args = vec!["train"];
        args.extend(extra);
        args.extend(common);
        ok(&args);
    };
    run(&["--out", s(&full), "--steps", "12"]);
    run(&["--out", s(&half), "--steps", "5"]);
    run(&["--resume", s(&half), "--out", s(&resumed), "--steps", "12"]);
    assert_eq!(std::fs::read(&full).unwrap(), std::fs::read(&resumed).unwrap());
}
