//! End-to-end contract tests driving the compiled binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_radsplat"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn radsplat")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

/// Tiny dataset shared by the training tests: 3 views, 2 frames, 16x16 HR.
fn make_dataset(dir: &Path) {
    let out = run(&[
        "phantom",
        "--out",
        dir.to_str().unwrap(),
        "--views",
        "3",
        "--frames",
        "2",
        "--hr",
        "16",
        "--branches",
        "3",
        "--blobs-per-branch",
        "6",
        "--seed",
        "11",
    ]);
    stdout_json(&out);
}

/// Config shrinking the field so tests stay fast.
fn write_tiny_config(path: &Path) {
    std::fs::write(
        path,
        r#"
n_init_kernels = 2
holdout_every = 3
holdout_offset = 2

[field]
hidden_width = 8
hidden_layers = 1

[field.enc3d]
levels = 2
table_size_log2 = 8
base_resolution = 4

[field.enc4d]
levels = 2
table_size_log2 = 8
base_resolution = 4
"#,
    )
    .unwrap();
}

fn train_tiny(data: &Path, out: &Path, config: &Path, extra: &[&str]) -> serde_json::Value {
    let mut args = vec![
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--sr-mode",
        "off",
        "--threads",
        "1",
    ];
    args.extend_from_slice(extra);
    let output = run(&args);
    stdout_json(&output)
}

#[test]
fn help_exits_zero_and_unknown_flag_exits_two() {
    let help = run(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    let text = String::from_utf8_lossy(&help.stdout);
    for sub in ["phantom", "train", "render", "eval"] {
        assert!(text.contains(sub), "--help missing subcommand {sub}");
    }

    assert_eq!(run(&["train", "--nope"]).status.code(), Some(2));
    assert_eq!(run(&["phantom"]).status.code(), Some(2), "missing --out");
    let bad_mode = run(&["train", "--data", "x", "--out", "y", "--sr-mode", "garbage"]);
    assert_eq!(bad_mode.status.code(), Some(2));
}

#[test]
fn phantom_writes_counted_dataset_and_is_seed_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    make_dataset(&ds);

    let count = |sub: &str| {
        std::fs::read_dir(ds.join(sub))
            .unwrap()
            .filter(|e| {
                e.as_ref().unwrap().path().extension().map(|x| x == "pfm") == Some(true)
            })
            .count()
    };
    assert_eq!(count("hr"), 6);
    assert_eq!(count("lr"), 6);
    assert!(ds.join("manifest.json").exists());
    assert!(ds.join("geometry.json").exists());

    let ds2 = tmp.path().join("ds2");
    make_dataset(&ds2);
    let file = "hr/1_0001.pfm";
    assert_eq!(
        std::fs::read(ds.join(file)).unwrap(),
        std::fs::read(ds2.join(file)).unwrap(),
        "same seed must give byte-identical projections"
    );

    let ds3 = tmp.path().join("ds3");
    let out = run(&[
        "phantom",
        "--out",
        ds3.to_str().unwrap(),
        "--views",
        "3",
        "--frames",
        "2",
        "--hr",
        "16",
        "--branches",
        "3",
        "--blobs-per-branch",
        "6",
        "--seed",
        "12",
    ]);
    stdout_json(&out);
    assert_ne!(
        std::fs::read(ds.join(file)).unwrap(),
        std::fs::read(ds3.join(file)).unwrap(),
        "different seed must change the phantom"
    );
}

#[test]
fn train_iters_zero_emits_init_checkpoint_and_config_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    make_dataset(&ds);
    let cfg = tmp.path().join("tiny.toml");
    write_tiny_config(&cfg);

    let run0 = tmp.path().join("run0");
    let report = train_tiny(&ds, &run0, &cfg, &["--iters", "0"]);
    assert!(report["final_loss"].is_null());
    assert!(run0.join("checkpoint_final.bin").exists());
    assert_eq!(
        std::fs::read_to_string(run0.join("train_log.jsonl"))
            .unwrap()
            .lines()
            .count(),
        0
    );

    // File sets the iteration count; the flag overrides it.
    let cfg_iters = tmp.path().join("iters.toml");
    let mut text = std::fs::read_to_string(&cfg).unwrap();
    text = format!("iters = 5\n{text}");
    std::fs::write(&cfg_iters, text).unwrap();

    let run_file = tmp.path().join("run_file");
    train_tiny(&ds, &run_file, &cfg_iters, &[]);
    assert_eq!(
        std::fs::read_to_string(run_file.join("train_log.jsonl"))
            .unwrap()
            .lines()
            .count(),
        5
    );

    let run_flag = tmp.path().join("run_flag");
    train_tiny(&ds, &run_flag, &cfg_iters, &["--iters", "2"]);
    assert_eq!(
        std::fs::read_to_string(run_flag.join("train_log.jsonl"))
            .unwrap()
            .lines()
            .count(),
        2
    );
}

#[test]
fn train_seed_is_byte_reproducible_single_threaded() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    make_dataset(&ds);
    let cfg = tmp.path().join("tiny.toml");
    write_tiny_config(&cfg);

    let run_a = tmp.path().join("a");
    let run_b = tmp.path().join("b");
    train_tiny(&ds, &run_a, &cfg, &["--iters", "3", "--seed", "7"]);
    train_tiny(&ds, &run_b, &cfg, &["--iters", "3", "--seed", "7"]);
    assert_eq!(
        std::fs::read(run_a.join("checkpoint_final.bin")).unwrap(),
        std::fs::read(run_b.join("checkpoint_final.bin")).unwrap()
    );
}

#[test]
fn unknown_config_key_is_a_hard_error() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    make_dataset(&ds);
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "iters = 3\nnonsense_key = 1\n").unwrap();
    let out = bin()
        .args(["train", "--data", ds.to_str().unwrap(), "--out"])
        .arg(tmp.path().join("run"))
        .args(["--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("nonsense_key"), "stderr was: {err}");
}

#[test]
fn sr_dir_mode_ingests_files_and_missing_labels_fail() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    make_dataset(&ds);
    let cfg = tmp.path().join("tiny.toml");
    write_tiny_config(&cfg);

    // The dataset HR directory is a valid pseudo-label source: same names,
    // exactly 4x the LR resolution.
    let hr_dir = ds.join("hr");
    let sr_arg = format!("dir={}", hr_dir.display());
    let out = run(&[
        "train",
        "--data",
        ds.to_str().unwrap(),
        "--out",
        tmp.path().join("run_sr").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--iters",
        "2",
        "--sr-mode",
        &sr_arg,
    ]);
    let report = stdout_json(&out);
    assert!(report["final_loss"].as_f64().unwrap().is_finite());

    let missing = run(&[
        "train",
        "--data",
        ds.to_str().unwrap(),
        "--out",
        tmp.path().join("run_missing").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--iters",
        "2",
        "--sr-mode",
        "dir=/nonexistent/sr",
    ]);
    assert_eq!(missing.status.code(), Some(1));
}

fn trained_run(tmp: &Path) -> (PathBuf, PathBuf) {
    let ds = tmp.join("ds");
    make_dataset(&ds);
    let cfg = tmp.join("tiny.toml");
    write_tiny_config(&cfg);
    let run = tmp.join("run");
    train_tiny(&ds, &run, &cfg, &["--iters", "2", "--seed", "5"]);
    (ds, run.join("checkpoint_final.bin"))
}

#[test]
fn render_matches_evaluates_image_bit_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let (ds, ckpt) = trained_run(tmp.path());

    let rendered = tmp.path().join("render_cli.pfm");
    let out = run(&[
        "render",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        ds.to_str().unwrap(),
        "--view",
        "0",
        "--t",
        "0.0",
        "--out",
        rendered.to_str().unwrap(),
    ]);
    stdout_json(&out);

    // Recompute through the library exactly the way evaluate scores images.
    let dataset = radsplat::Dataset::load(&ds).unwrap();
    let (scene, field, _) = radsplat::read_checkpoint(&ckpt).unwrap();
    let view = dataset.views.iter().find(|v| v.view_id == 0).unwrap();
    let (w, h) = dataset.manifest.hr_dims;
    let img = radsplat::render(
        &scene,
        &field,
        view,
        w,
        h,
        dataset.times[0],
        radsplat::ImageRole::RenderHr,
        &radsplat::RasterConfig::default(),
    )
    .unwrap();
    let reference = tmp.path().join("render_lib.pfm");
    radsplat::write_pfm(&reference, &img.image).unwrap();
    assert_eq!(
        std::fs::read(&rendered).unwrap(),
        std::fs::read(&reference).unwrap(),
        "CLI render must reproduce the evaluation-path image byte for byte"
    );
}

#[test]
fn render_honors_res_and_rejects_bad_time() {
    let tmp = tempfile::tempdir().unwrap();
    let (ds, ckpt) = trained_run(tmp.path());

    let upscaled = tmp.path().join("up.pfm");
    let out = run(&[
        "render",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        ds.to_str().unwrap(),
        "--view",
        "1",
        "--t",
        "0.5",
        "--res",
        "32",
        "--out",
        upscaled.to_str().unwrap(),
    ]);
    let summary = stdout_json(&out);
    assert_eq!(summary["width"], 32);
    let img = radsplat::read_pfm(&upscaled, radsplat::ImageRole::RenderHr).unwrap();
    assert_eq!((img.width, img.height), (32, 32));

    let bad = run(&[
        "render",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        ds.to_str().unwrap(),
        "--view",
        "0",
        "--t",
        "1.5",
        "--out",
        tmp.path().join("bad.pfm").to_str().unwrap(),
    ]);
    assert_eq!(bad.status.code(), Some(1));
    let err = String::from_utf8_lossy(&bad.stderr);
    assert!(err.contains("time"), "stderr was: {err}");
}

#[test]
fn eval_emits_mean_metrics_and_rejects_corrupt_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let (ds, ckpt) = trained_run(tmp.path());

    let out = run(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        ds.to_str().unwrap(),
        "--split",
        "all",
    ]);
    let report = stdout_json(&out);
    for key in ["mean_psnr", "mean_ssim", "mean_lr_psnr"] {
        assert!(report[key].is_f64(), "missing {key}");
    }
    assert_eq!(report["n_images"], 6);
    // Means must match the per-image dump.
    let per: Vec<f64> = report["per_image"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["psnr"].as_f64().unwrap())
        .collect();
    let mean = per.iter().sum::<f64>() / per.len() as f64;
    assert!((report["mean_psnr"].as_f64().unwrap() - mean).abs() < 1e-9);

    // Heldout split under holdout_every=3, offset=2 selects view 2 only.
    let held = stdout_json(&run(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        ds.to_str().unwrap(),
        "--split",
        "heldout",
    ]));
    assert_eq!(held["n_images"], 2);

    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[0] ^= 0xff;
    let corrupt = tmp.path().join("corrupt.bin");
    std::fs::write(&corrupt, bytes).unwrap();
    let bad = run(&[
        "eval",
        "--checkpoint",
        corrupt.to_str().unwrap(),
        "--data",
        ds.to_str().unwrap(),
    ]);
    assert_eq!(bad.status.code(), Some(1));
}
