use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use classmap::autodiff::save_checkpoint;
use classmap::enhancer::EnhancerConfig;
use classmap::metrics::evaluate;
use classmap::{netpbm, seeded_rng, ScoreStack, Tensor};

fn classmap(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_classmap"))
        .current_dir(dir)
        .env_remove("CLASSMAP_OUTPUT_DIR")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = classmap(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    classmap(dir, args).status.code().expect("exited")
}

/// Small scenes, a small coarse network and short training runs.
fn tiny_config(dir: &Path, file: &str, rnn_steps: usize) -> PathBuf {
    let text = format!(
        r#"{{
  "seed": 5,
  "dataset": {{ "scene_size": 64, "train_scenes": 2 }},
  "coarse": {{
    "network": {{ "widths": [4, 4, 4] }},
    "training": {{ "steps": 4, "batch": 2, "patch": 32 }}
  }},
  "enhancer": {{ "heat_filters": 4, "image_filters": 4, "hidden": 4, "iterations": 2 }},
  "enhancer_training": {{ "steps": {rnn_steps}, "batch": 2, "patch": 16 }},
  "output_dir": "out"
}}"#
    );
    let path = dir.join(file);
    fs::write(&path, text).unwrap();
    path
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn usage_and_configuration_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(d, &["frobnicate"]), 1);
    assert_eq!(code(d, &["baseline", "--scheme", "heat"]), 1);
    assert_eq!(code(d, &["baseline", "--scheme", "wave", "--image", "x", "--scores", "y", "--out", "o"]), 1);
    assert_eq!(code(d, &["--help"]), 0);
    fs::write(d.join("bad.json"), r#"{"seed": 1, "colour": "blue"}"#).unwrap();
    assert_eq!(code(d, &["synth", "--config", "bad.json"]), 1);
    assert_eq!(code(d, &["synth", "--config", "missing.json"]), 1);
    assert_eq!(code(d, &["train-rnn", "--config", tiny_config(d, "config.json", 6).to_str().unwrap()]), 1);
}

#[test]
fn synth_is_reproducible_and_counts_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = tiny_config(d, "config.json", 6);
    ok(d, &["synth", "--config", config.to_str().unwrap()]);
    let first = files(&d.join("out"));
    fs::remove_dir_all(d.join("out")).unwrap();
    ok(d, &["synth", "--config", config.to_str().unwrap()]);
    assert_eq!(files(&d.join("out")), first);
    let images = |split: &str| {
        fs::read_dir(d.join("out/data").join(split))
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ppm"))
            .count()
    };
    assert_eq!((images("train"), images("enhancement"), images("test")), (2, 1, 1));
}

#[test]
fn output_directory_can_be_overridden() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = tiny_config(d, "config.json", 6);
    let out = Command::new(env!("CARGO_BIN_EXE_classmap"))
        .current_dir(d)
        .env("CLASSMAP_OUTPUT_DIR", d.join("elsewhere"))
        .args(["synth", "--config", config.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(d.join("elsewhere/data/test/scene_000.ppm").exists());
    assert!(!d.join("out").exists());
}

#[test]
fn enhancer_training_resumes_where_it_stopped() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = tiny_config(d, "config.json", 6);
    let c = config.to_str().unwrap();
    ok(d, &["synth", "--config", c]);
    ok(d, &["train-rnn", "--config", c, "--checkpoint-every", "6"]);
    let straight = files(&d.join("out/checkpoints/rnn"));
    let straight_loss = fs::read_to_string(d.join("out/loss_rnn.csv")).unwrap();
    assert_eq!(straight_loss.lines().count(), 7);

    fs::remove_dir_all(d.join("out/checkpoints")).unwrap();
    let half = tiny_config(d, "half.json", 3);
    ok(d, &["train-rnn", "--config", half.to_str().unwrap()]);
    ok(d, &["train-rnn", "--config", c, "--resume"]);
    assert_eq!(files(&d.join("out/checkpoints/rnn")), straight);
    assert_eq!(fs::read_to_string(d.join("out/loss_rnn.csv")).unwrap(), straight_loss);
}

#[test]
fn enhancer_training_leaves_the_coarse_checkpoint_alone() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = tiny_config(d, "config.json", 6);
    let c = config.to_str().unwrap();
    ok(d, &["synth", "--config", c]);
    ok(d, &["train-coarse", "--config", c, "--checkpoint-every", "2"]);
    let coarse = d.join("out/checkpoints/coarse");
    let before = files(&coarse);
    assert!(!before.is_empty());
    assert_eq!(fs::read_to_string(d.join("out/loss_coarse.csv")).unwrap().lines().count(), 5);

    let text = fs::read_to_string(&config).unwrap().replace(
        r#""coarse": {"#,
        &format!(r#""coarse": {{ "provider": {{ "kind": "network", "checkpoint": {:?} }},"#, coarse),
    );
    fs::write(d.join("network.json"), text).unwrap();
    ok(d, &["train-rnn", "--config", "network.json"]);
    assert!(d.join("out/checkpoints/rnn/manifest.json").exists());
    assert_eq!(files(&coarse), before);
}

/// An identity enhancer checkpoint (fresh initialization) and a score file.
fn identity_setup(d: &Path) -> (PathBuf, ScoreStack) {
    let config = tiny_config(d, "config.json", 6);
    ok(d, &["synth", "--config", config.to_str().unwrap()]);
    let cfg = EnhancerConfig {
        iterations: 5,
        heat_filters: 4,
        image_filters: 4,
        hidden: 4,
        ..EnhancerConfig::default()
    };
    let params = cfg.init(&mut seeded_rng(1)).unwrap();
    let ckpt = d.join("identity");
    save_checkpoint(&ckpt, &params, serde_json::json!({ "enhancer": cfg })).unwrap();

    let truth = netpbm::load_labels(d.join("out/data/test/scene_000_truth.pgm")).unwrap();
    let u0 = ScoreStack::new(classmap::ops::softmax_channels(&truth.one_hot(3, 1.0, -1.0).unwrap()).unwrap()).unwrap();
    // Perturb a corner so the argmax differs from the truth there.
    let mut t = u0.tensor().clone();
    for x in 0..8 {
        let base = x * 3;
        t.data_mut()[base..base + 3].copy_from_slice(&[0.1, 0.2, 0.7]);
    }
    let u0 = ScoreStack::new(t).unwrap();
    u0.tensor().save(d.join("u0.tsr")).unwrap();
    (ckpt, u0)
}

#[test]
fn enhance_dumps_every_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (ckpt, u0) = identity_setup(d);
    let image = "out/data/test/scene_000.ppm";
    ok(
        d,
        &["enhance", "--checkpoint", ckpt.to_str().unwrap(), "--image", image, "--scores", "u0.tsr", "--out", "enh"],
    );
    let argmax: Vec<Vec<u8>> = (0..6).map(|t| fs::read(d.join(format!("enh/argmax_t{t}.ppm"))).unwrap()).collect();
    assert!(!d.join("enh/argmax_t6.ppm").exists());
    assert!(argmax.iter().all(|m| m == &argmax[0]));
    for t in 0..6 {
        assert_eq!(&Tensor::load(d.join(format!("enh/u_t{t}.tsr"))).unwrap(), u0.tensor());
        for k in 0..3 {
            assert!(d.join(format!("enh/u_t{t}_class{k}.pgm")).exists());
        }
    }

    Tensor::filled(&[8, 8, 3], 1.0 / 3.0).save(d.join("small.tsr")).unwrap();
    let args = ["enhance", "--checkpoint", ckpt.to_str().unwrap(), "--image", image, "--scores", "small.tsr", "--out", "x"];
    assert_eq!(code(d, &args), 1);
}

#[test]
fn enhance_accepts_labels_through_the_degrader() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (ckpt, _) = identity_setup(d);
    let args = [
        "enhance",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image",
        "out/data/test/scene_000.ppm",
        "--labels",
        "out/data/test/scene_000_ref.pgm",
        "--config",
        "config.json",
        "--out",
        "enh",
    ];
    ok(d, &args);
    let u = Tensor::load(d.join("enh/u_t0.tsr")).unwrap();
    assert_eq!(u.shape(), &[64, 64, 3]);
    ok(d, &args);
    assert_eq!(Tensor::load(d.join("enh/u_t0.tsr")).unwrap(), u);
}

#[test]
fn zero_step_baseline_scores_the_input() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (_, u0) = identity_setup(d);
    let truth_path = "out/data/test/scene_000_truth.pgm";
    let truth = netpbm::load_labels(d.join(truth_path)).unwrap();
    let expected = evaluate(&u0.argmax(), &truth, 3).unwrap();
    for scheme in ["heat", "perona_malik", "gac"] {
        let stdout = ok(
            d,
            &[
                "baseline", "--scheme", scheme, "--image", "out/data/test/scene_000.ppm", "--scores", "u0.tsr",
                "--steps", "0", "--truth", truth_path, "--out", "base",
            ],
        );
        assert_eq!(stdout.lines().nth(1).unwrap(), expected.csv_row(scheme, 0));
        assert_eq!(fs::read_to_string(d.join("base/metrics.csv")).unwrap(), stdout);
        assert_eq!(&Tensor::load(d.join("base/final.tsr")).unwrap(), u0.tensor());
    }
    ok(
        d,
        &[
            "baseline", "--scheme", "perona_malik", "--image", "out/data/test/scene_000.ppm", "--scores", "u0.tsr",
            "--steps", "3", "--snapshots", "--out", "snap",
        ],
    );
    assert!(d.join("snap/argmax_t3.ppm").exists() && !d.join("snap/metrics.csv").exists());
}

#[test]
fn eval_of_identical_maps_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = tiny_config(d, "config.json", 6);
    ok(d, &["synth", "--config", config.to_str().unwrap()]);
    let truth = "out/data/test/scene_000_truth.pgm";
    let stdout = ok(d, &["eval", "--pred", truth, "--truth", truth, "--run-id", "self"]);
    let row: Vec<&str> = stdout.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "self");
    assert!(row[2..].iter().all(|v| v.parse::<f64>().unwrap() == 1.0), "{row:?}");
    assert_eq!(code(d, &["eval", "--pred", "out/data/train/scene_000_truth.pgm", "--truth", "u0.pgm"]), 1);
}

#[test]
fn non_finite_inputs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    netpbm::save_image(d.join("img.ppm"), &Tensor::filled(&[8, 8, 3], 0.5)).unwrap();
    let mut u = Tensor::filled(&[8, 8, 3], 1.0 / 3.0);
    u.data_mut()[4] = f32::NAN;
    u.save(d.join("u.tsr")).unwrap();
    let args = ["baseline", "--scheme", "heat", "--image", "img.ppm", "--scores", "u.tsr", "--steps", "2", "--out", "o"];
    assert_eq!(code(d, &args), 2);
}
