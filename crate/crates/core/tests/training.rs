use std::path::PathBuf;

use candle_core::{DType, Tensor};
use trisect_core::descriptors::vsd::encode_bundle;
use trisect_core::descriptors::{render_ab, AB_SCALE};
use trisect_core::encoder::Encoder;
use trisect_core::losses::Objective;
use trisect_core::model::{ModelConfig, ENCODER_PREFIX};
use trisect_core::synthetic;
use trisect_core::training::*;
use trisect_core::{Error, RgbImage};

fn tiny_config(steps: usize) -> TrainConfig {
    let m = ModelConfig::tiny();
    TrainConfig {
        image_size: 16,
        batch_size: 2,
        total_steps: steps,
        warmup_steps: 1,
        base_lr: 1e-3,
        encoder: m.encoder,
        decoder: m.decoder,
        ..TrainConfig::default()
    }
}

fn tiny_data(cfg: &TrainConfig) -> Dataset {
    Dataset::from_images(synthetic::scenes(3, cfg.image_size, 5).unwrap(), &cfg.descriptor).unwrap()
}

fn trace(records: &[StepRecord]) -> Vec<String> {
    records.iter().map(|r| serde_json::to_string(r).unwrap()).collect()
}

fn run(state: &mut TrainState, data: &Dataset, stop_at: usize) -> Vec<StepRecord> {
    let objective = Objective::new(&state.config.loss).unwrap();
    state.run(data, &objective, None, |s, _| s.step >= stop_at, false).unwrap()
}

#[test]
fn two_runs_give_identical_reports() {
    let cfg = tiny_config(4);
    let data = tiny_data(&cfg);
    let a = run(&mut TrainState::new(&cfg).unwrap(), &data, 4);
    let b = run(&mut TrainState::new(&cfg).unwrap(), &data, 4);
    assert_eq!(a.len(), 4);
    assert_eq!(trace(&a), trace(&b));
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let mut cfg = tiny_config(3);
    cfg.base_lr = 0.0;
    let data = tiny_data(&cfg);
    let mut state = TrainState::new(&cfg).unwrap();
    let before = state.model.params().digest("").unwrap();
    run(&mut state, &data, 3);
    assert_eq!(state.step, 3);
    assert_eq!(state.model.params().digest("").unwrap(), before);
    assert!(state.optim.moments.values().any(|(m, _)| m.iter().any(|x| *x != 0.0)));
}

#[test]
fn non_finite_loss_aborts_without_changes() {
    let cfg = tiny_config(3);
    let data = tiny_data(&cfg);
    let mut state = TrainState::new(&cfg).unwrap();
    run(&mut state, &data, 1);
    let digest = state.model.params().digest("").unwrap();
    let moments = state.optim.moments.clone();
    let mut batch = data.batch(&[0, 1]).unwrap();
    batch.images = (batch.images.ones_like().unwrap() * f64::NAN).unwrap();
    let objective = Objective::new(&cfg.loss).unwrap();
    match state.train_step(&batch, &objective) {
        Err(Error::NonFinite { component }) => assert_eq!(component, "pixel"),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
    assert_eq!(state.step, 1);
    assert_eq!(state.model.params().digest("").unwrap(), digest);
    assert_eq!(state.optim.moments, moments);
}

#[test]
fn small_config_overfits_four_images() {
    let m = ModelConfig::small();
    let cfg = TrainConfig {
        image_size: 64,
        batch_size: 4,
        total_steps: 200,
        warmup_steps: 10,
        base_lr: 1e-3,
        encoder: m.encoder,
        decoder: m.decoder,
        ..TrainConfig::default()
    };
    let data = Dataset::from_images(synthetic::scenes(4, 64, 0).unwrap(), &cfg.descriptor).unwrap();
    let records = run(&mut TrainState::new(&cfg).unwrap(), &data, 200);
    let (first, last) = (records[0].loss.total, records[199].loss.total);
    assert!(last < 0.2 * first, "loss {first} -> {last}");
}

#[test]
fn checkpoint_roundtrip_is_bit_identical() {
    let cfg = tiny_config(4);
    let data = tiny_data(&cfg);
    let mut state = TrainState::new(&cfg).unwrap();
    run(&mut state, &data, 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.vsck");
    state.save(&path).unwrap();
    let back = TrainState::load(&path).unwrap();
    assert_eq!(back.step, 2);
    assert_eq!(back.config, state.config);
    assert_eq!(back.optim.moments, state.optim.moments);
    for (name, v) in state.model.params().iter() {
        let a = v.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = back.model.params().get(name).unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            "{name}"
        );
    }
    let again = dir.path().join("b.vsck");
    back.save(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());

    let mut other = ModelConfig::tiny();
    other.encoder.embed_dim = 48;
    assert!(TrainState::load_expecting(&path, &other).is_err());
    assert!(TrainState::load_expecting(&path, &ModelConfig::tiny()).is_ok());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let mut cfg = tiny_config(4);
    cfg.augment.brightness = 10.0;
    let data = tiny_data(&cfg);
    let full = run(&mut TrainState::new(&cfg).unwrap(), &data, 4);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.vsck");
    let mut first = TrainState::new(&cfg).unwrap();
    let head = run(&mut first, &data, 2);
    first.save(&path).unwrap();
    let mut resumed = TrainState::load(&path).unwrap();
    let tail = run(&mut resumed, &data, 3);
    assert_eq!(tail.len(), 1);
    assert_eq!(trace(&head), trace(&full[..2]));
    assert_eq!(trace(&tail), trace(&full[2..3]));
}

#[test]
fn run_writes_metrics_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(4);
    cfg.checkpoint_every = 2;
    cfg.output_dir = dir.path().join("out");
    let data = tiny_data(&cfg);
    let mut log = Vec::new();
    let objective = Objective::new(&cfg.loss).unwrap();
    let mut state = TrainState::new(&cfg).unwrap();
    state.run(&data, &objective, Some(&mut log), |_, _| false, true).unwrap();
    let lines: Vec<serde_json::Value> = String::from_utf8(log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[3]["step"], 4);
    assert!(lines[0]["total"].is_number() && lines[0]["lr"].is_number());
    for name in ["step-000002.vsck", "step-000004.vsck", "final.vsck"] {
        assert!(cfg.output_dir.join(name).exists(), "{name}");
    }
    let model = load_model(&cfg.output_dir.join("final.vsck")).unwrap();
    assert_eq!(
        model.params().digest(ENCODER_PREFIX).unwrap(),
        state.model.params().digest(ENCODER_PREFIX).unwrap()
    );
}

fn write_png(path: &PathBuf, h: u32, w: u32) {
    let img = image::RgbImage::from_fn(w, h, |x, y| image::Rgb([(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8]));
    img.save(path).unwrap();
}

#[test]
fn prepare_batch_crops_skips_and_rejects() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("wide.png");
    write_png(&good, 300, 500);
    let bad = dir.path().join("broken.png");
    std::fs::write(&bad, b"not an image").unwrap();
    let mut cfg = tiny_config(2);
    cfg.image_size = 224;

    let batch = prepare_batch(&[bad.clone(), good.clone()], &cfg).unwrap();
    assert_eq!(batch.len(), 1);
    assert_eq!(batch.images.dims(), &[1, 3, 224, 224]);
    // Column 74 of the 373-wide resize lands at x = 0 of the crop.
    let src = image::open(&good).unwrap().to_rgb8();
    let expected = resize_and_crop(&src, 224);
    let got = RgbImage::new(batch.images.get(0).unwrap()).unwrap().to_rgb8().unwrap();
    assert_eq!(got, expected);

    assert!(matches!(prepare_batch(&[bad], &cfg), Err(Error::EmptyBatch)));
    assert!(matches!(prepare_batch(&[], &cfg), Err(Error::EmptyBatch)));

    let again = prepare_batch(&[good.clone(), good], &cfg).unwrap();
    let bytes: Vec<Vec<u8>> = again.bundles.iter().map(|b| encode_bundle(b).unwrap()).collect();
    assert_eq!(bytes[0], bytes[1]);
    assert_eq!(bytes[0], encode_bundle(&batch.bundles[0]).unwrap());
}

#[test]
fn encoder_inputs_come_from_bundle_fields_only() {
    let cfg = tiny_config(2);
    let data = tiny_data(&cfg);
    let batch = data.batch(&[0, 1]).unwrap();
    let (spatial, hist) = Encoder::bundle_inputs(&batch.bundles, DType::F32).unwrap();
    for (i, b) in batch.bundles.iter().enumerate() {
        let ab = (render_ab(&b.segmentation).unwrap().permute((2, 0, 1)).unwrap() / AB_SCALE).unwrap();
        let manual = Tensor::cat(&[&b.edges.magnitude.unsqueeze(0).unwrap(), &ab], 0).unwrap();
        let diff = (spatial.get(i).unwrap() - manual).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0);
        let hd = (hist.get(i).unwrap() - &b.histogram.weights).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(hd.to_scalar::<f32>().unwrap(), 0.0);
    }
    // Replacing the pixels leaves the reconstruction untouched.
    let state = TrainState::new(&cfg).unwrap();
    let (_, r1) = state.model.forward(&batch.bundles).unwrap();
    let mut scrambled = batch.clone();
    scrambled.images = scrambled.images.zeros_like().unwrap();
    let (_, r2) = state.model.forward(&scrambled.bundles).unwrap();
    let d = (r1.pixels - r2.pixels).unwrap().abs().unwrap().max_all().unwrap();
    assert_eq!(d.to_scalar::<f32>().unwrap(), 0.0);
}

#[test]
fn brightness_jitter_is_seeded_and_reextracts() {
    let mut cfg = tiny_config(2);
    cfg.augment.brightness = 20.0;
    let data = tiny_data(&cfg);
    let a = data.augmented_batch(&[0, 1], 3, 7, &cfg.augment, &cfg.descriptor).unwrap();
    let b = data.augmented_batch(&[0, 1], 3, 7, &cfg.augment, &cfg.descriptor).unwrap();
    let c = data.augmented_batch(&[0, 1], 3, 8, &cfg.augment, &cfg.descriptor).unwrap();
    let vals = |t: &Tensor| t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert_eq!(vals(&a.images), vals(&b.images));
    assert_ne!(vals(&a.images), vals(&c.images));
    let plain = data.batch(&[0, 1]).unwrap();
    assert_ne!(vals(&a.images), vals(&plain.images));
    assert_ne!(vals(&a.bundles[0].histogram.weights), vals(&plain.bundles[0].histogram.weights));
    let off = data.augmented_batch(&[0, 1], 3, 7, &AugmentConfig::default(), &cfg.descriptor).unwrap();
    assert_eq!(vals(&off.images), vals(&plain.images));
}
