use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use trisect_core::descriptors::vsd::read_bundle;
use trisect_core::descriptors::{recolour_region, shift_histogram};
use trisect_core::model::ModelConfig;
use trisect_core::synthetic;
use trisect_core::training::TrainConfig;

fn trisect(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trisect")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = trisect(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_scene(path: &Path, size: usize, seed: u64) {
    synthetic::scene(size, seed).unwrap().to_rgb8().unwrap().save(path).unwrap();
}

/// Tiny model, 16 px, a few steps.
fn write_config(dir: &Path, data: &Path, steps: usize) -> PathBuf {
    let m = ModelConfig::tiny();
    let cfg = TrainConfig {
        image_size: 16,
        batch_size: 2,
        total_steps: steps,
        warmup_steps: 1,
        base_lr: 1e-3,
        dataset_root: data.to_path_buf(),
        output_dir: dir.join("run"),
        encoder: m.encoder,
        decoder: m.decoder,
        ..TrainConfig::default()
    };
    let mut table = toml::Table::new();
    table.insert("train".into(), toml::Value::try_from(&cfg).unwrap());
    let text = toml::to_string(&table).unwrap();
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn scene_folder(dir: &Path, n: usize) -> PathBuf {
    let data = dir.join("images");
    std::fs::create_dir_all(&data).unwrap();
    for i in 0..n {
        write_scene(&data.join(format!("{i}.png")), 16, i as u64);
    }
    data
}

#[test]
fn extract_then_reconstruct_matches_bundle_shape() {
    let dir = tempfile::tempdir().unwrap();
    let data = scene_folder(dir.path(), 3);
    let config = write_config(dir.path(), &data, 2);
    ok(&["train", "--config", s(&config)]);
    let ckpt = dir.path().join("run/final.vsck");
    assert!(ckpt.exists());
    assert_eq!(std::fs::read_to_string(dir.path().join("run/metrics.jsonl")).unwrap().lines().count(), 2);

    let img = dir.path().join("wide.png");
    image::RgbImage::from_fn(24, 16, |x, y| image::Rgb([(x * 10) as u8, (y * 15) as u8, 90])).save(&img).unwrap();
    let vsd = dir.path().join("wide.vsd");
    ok(&["extract", s(&img), "-o", s(&vsd)]);
    for suffix in ["edges", "segments", "histogram"] {
        assert!(dir.path().join(format!("wide-{suffix}.png")).exists(), "{suffix}");
    }
    let recon = dir.path().join("recon.png");
    let out = ok(&["reconstruct", s(&ckpt), s(&vsd), "-o", s(&recon)]);
    let decoded = image::open(&recon).unwrap();
    assert_eq!((decoded.width(), decoded.height()), (24, 16));
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "{}");

    let out = ok(&["reconstruct", s(&ckpt), s(&vsd), "-o", s(&recon), "--reference", s(&img)]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["psnr"].is_number() && report["ssim"].is_number());

    // An image input is resized to the training size and scored against itself.
    let out = ok(&["reconstruct", s(&ckpt), s(&img), "-o", s(&recon)]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["psnr"].is_number());
    assert_eq!(image::open(&recon).unwrap().width(), 16);
}

#[test]
fn edit_flags_apply_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("img.png");
    write_scene(&img, 32, 4);
    let vsd = dir.path().join("img.vsd");
    ok(&["extract", s(&img), "-o", s(&vsd), "--no-previews"]);
    assert!(!dir.path().join("img-edges.png").exists());
    let edited = dir.path().join("edited.vsd");
    ok(&["edit", s(&vsd), "--recolour", "2:0,60", "--shift-hist", "+15", "-o", s(&edited)]);

    let before = read_bundle(&vsd).unwrap();
    let after = read_bundle(&edited).unwrap();
    assert_eq!(after.segmentation.centroid_list().unwrap()[2], [0.0, 60.0]);
    let expected_seg = recolour_region(&before.segmentation, 2, [0.0, 60.0]).unwrap();
    assert_eq!(after.segmentation.centroid_list().unwrap(), expected_seg.centroid_list().unwrap());
    let expected_hist = shift_histogram(&before.histogram, 15.0).unwrap();
    assert_eq!(after.histogram.weights_vec().unwrap(), expected_hist.weights_vec().unwrap());
    assert!(after.histogram.mean_l().unwrap() > before.histogram.mean_l().unwrap());

    // Negative shifts parse; a script runs before the flags.
    let script = dir.path().join("ops.json");
    std::fs::write(&script, r#"[{"op":"shift_hist","args":{"delta_l":5}}]"#).unwrap();
    let down = dir.path().join("down.vsd");
    ok(&["edit", s(&vsd), "--script", s(&script), "--shift-hist", "-5", "-o", s(&down)]);
    let round = read_bundle(&down).unwrap();
    let oracle = shift_histogram(&shift_histogram(&before.histogram, 5.0).unwrap(), -5.0).unwrap();
    assert_eq!(round.histogram.weights_vec().unwrap(), oracle.weights_vec().unwrap());

    let out = trisect(&["edit", s(&vsd), "--recolour", "99:0,0", "-o", s(&down)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_one() {
    let out = trisect(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(trisect(&["extract"]).status.code(), Some(1));
    assert_eq!(trisect(&["edit", "a.vsd", "--recolour", "nope", "-o", "b.vsd"]).status.code(), Some(1));
    assert_eq!(trisect(&["--help"]).status.code(), Some(0));
}

#[test]
fn help_lists_config_paths() {
    let out = ok(&["train", "--help"]);
    let help = String::from_utf8(out.stdout).unwrap();
    for path in ["train.total_steps", "train.base_lr", "train.dataset_root", "train.descriptor.clusters"] {
        assert!(help.contains(path), "{path}");
    }
}

#[test]
fn runtime_errors_exit_two_with_json() {
    let out = trisect(&["--json", "extract", "/no/such/image.png"]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"].is_string() && err["message"].as_str().unwrap().contains("image.png"));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nbogus = 1\n").unwrap();
    let out = trisect(&["--json", "--config", s(&bad), "extract", "x.png"]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "config");
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let data = scene_folder(dir.path(), 3);
    let config = write_config(dir.path(), &data, 3);
    let img = data.join("0.png");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    // Checkpoints record their output folder, so both runs write to the same one.
    let run = dir.path().join("run");
    for out in [&a, &b] {
        ok(&["--seed", "9", "--config", s(&config), "extract", s(&img), "--out-dir", s(out)]);
        ok(&["--seed", "9", "--config", s(&config), "train", "-o", s(&run)]);
        std::fs::rename(&run, out.join("run")).unwrap();
    }
    for name in ["0.vsd", "0-edges.png", "0-segments.png", "0-histogram.png", "run/final.vsck", "run/metrics.jsonl"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
    ok(&["--seed", "10", "--config", s(&config), "train", "-o", s(&run)]);
    assert_ne!(std::fs::read(a.join("run/final.vsck")).unwrap(), std::fs::read(run.join("final.vsck")).unwrap());
}

#[test]
fn resume_extends_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = scene_folder(dir.path(), 3);
    let config = write_config(dir.path(), &data, 2);
    ok(&["--config", s(&config), "train"]);
    let ckpt = dir.path().join("run/final.vsck");
    let out = ok(&["train", "--resume", s(&ckpt), "--steps", "3"]);
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["step"], 3);
    assert_eq!(summary["steps_run"], 1);
    assert_eq!(std::fs::read_to_string(dir.path().join("run/metrics.jsonl")).unwrap().lines().count(), 3);
}

#[test]
fn probe_and_sweep_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = scene_folder(dir.path(), 3);
    let config = write_config(dir.path(), &data, 2);
    ok(&["--config", s(&config), "train"]);
    let labelled = dir.path().join("labelled");
    synthetic::write_labelled(&synthetic::patterns(3, 4, 16, 0).unwrap(), &labelled).unwrap();

    let ckpt = dir.path().join("run/final.vsck");
    let out = ok(&["probe", s(&ckpt), s(&labelled), "--epochs", "20"]);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["mode"], "linear");
    assert_eq!(report["encoder_digest_before"], report["encoder_digest_after"]);
    assert!(report["accuracy"].as_f64().unwrap() <= 1.0);

    let csv = dir.path().join("sweep.csv");
    ok(&[
        "--config", s(&config), "sweep", "--pretrain", s(&data), "--labelled", s(&labelled), "--ks", "2,4", "--steps", "2",
        "-o", s(&csv),
    ]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "K,accuracy,psnr,ssim");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("2,") && lines[2].starts_with("4,"));
}
