//! Pre-training: data preparation, the warmup + cosine schedule, AdamW,
//! the train step and checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{self, ArrayEntry, NamedArray};
use crate::colour::{lab_to_rgb, rgb_to_lab, LabImage, RgbImage};
use crate::decoder::DecoderConfig;
use crate::descriptors::{extract_bundle, DescriptorBundle, ExtractionConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossReport, Objective};
use crate::model::{Model, ModelConfig};
use crate::nn::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub image_size: usize,
    pub batch_size: usize,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    /// Global gradient-norm bound.
    pub grad_clip: f64,
    pub seed: u64,
    pub dataset_root: PathBuf,
    /// Where checkpoints and the metrics log go.
    pub output_dir: PathBuf,
    /// Steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub loss: LossConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub descriptor: ExtractionConfig,
    pub augment: AugmentConfig,
}

/// Per-step augmentation. Off by default; when on, descriptors are
/// re-extracted from each augmented image every step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Largest L shift, drawn uniformly from `[-brightness, brightness]`.
    pub brightness: f64,
}

impl AugmentConfig {
    pub fn enabled(&self) -> bool {
        self.brightness > 0.0
    }
}

/// Adds `delta_l` to the L channel, clamping back into the sRGB gamut.
pub fn shift_brightness(image: &RgbImage, delta_l: f64) -> Result<RgbImage> {
    let lab = rgb_to_lab(image)?;
    let l = lab.l.affine(1.0, delta_l)?.clamp(0.0, 100.0)?;
    lab_to_rgb(&LabImage::new(l, lab.a, lab.b)?)
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            image_size: 224,
            batch_size: 8,
            total_steps: 1000,
            warmup_steps: 50,
            base_lr: 1.5e-4,
            weight_decay: 0.05,
            betas: [0.9, 0.95],
            grad_clip: 1.0,
            seed: 0,
            dataset_root: PathBuf::from("data"),
            output_dir: PathBuf::from("runs"),
            checkpoint_every: 0,
            loss: LossConfig::default(),
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            descriptor: ExtractionConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return Err(Error::config(format!(
                "warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(self.encoder.patch_size) {
            return Err(Error::config(format!(
                "image_size {} is not a multiple of patch_size {}",
                self.image_size, self.encoder.patch_size
            )));
        }
        if !(self.base_lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::config("base_lr and weight_decay must be >= 0, grad_clip > 0"));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::config("betas must lie in [0, 1)"));
        }
        if self.descriptor.num_bins != self.encoder.num_bins {
            return Err(Error::config(format!(
                "descriptor.num_bins {} differs from encoder.num_bins {}",
                self.descriptor.num_bins, self.encoder.num_bins
            )));
        }
        if !(self.augment.brightness >= 0.0 && self.augment.brightness <= 100.0) {
            return Err(Error::config("augment.brightness must lie in [0, 100]"));
        }
        self.model().validate()?;
        self.loss.validate()?;
        self.descriptor.validate()
    }
}

/// Linear warmup to `base_lr`, then cosine decay to zero at `total_steps`.
pub fn lr_at(step: usize, config: &TrainConfig) -> Result<f64> {
    let (w, t) = (config.warmup_steps, config.total_steps);
    if step > t {
        return Err(Error::Range(format!("step {step} beyond total_steps {t}")));
    }
    if step < w {
        return Ok(config.base_lr * step as f64 / w as f64);
    }
    let progress = (step - w) as f64 / (t - w) as f64;
    Ok(config.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// `(height, width, top, left)` of the shorter-side resize and the centre crop.
pub fn resize_crop_geometry(height: usize, width: usize, size: usize) -> (usize, usize, usize, usize) {
    let scale = size as f64 / height.min(width) as f64;
    let rh = if height <= width { size } else { ((height as f64 * scale).round() as usize).max(size) };
    let rw = if width <= height { size } else { ((width as f64 * scale).round() as usize).max(size) };
    (rh, rw, (rh - size) / 2, (rw - size) / 2)
}

pub fn resize_and_crop(img: &image::RgbImage, size: usize) -> image::RgbImage {
    let (w, h) = img.dimensions();
    let (rh, rw, top, left) = resize_crop_geometry(h as usize, w as usize, size);
    let resized = if (rh, rw) == (h as usize, w as usize) {
        img.clone()
    } else {
        image::imageops::resize(img, rw as u32, rh as u32, FilterType::Triangle)
    };
    image::imageops::crop_imm(&resized, left as u32, top as u32, size as u32, size as u32).to_image()
}

pub fn load_image(path: &Path, size: usize) -> Result<RgbImage> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()?
        .to_rgb8();
    RgbImage::from_rgb8(&resize_and_crop(&img, size), DType::F32)
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Image files under `root`, recursively, in sorted order.
pub fn list_images(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if is_image(&path) {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// A crop and its descriptors.
#[derive(Debug, Clone)]
pub struct Sample {
    pub path: PathBuf,
    pub image: RgbImage,
    pub bundle: DescriptorBundle,
}

#[derive(Debug, Clone)]
pub struct Batch {
    /// `(B, 3, S, S)` targets.
    pub images: Tensor,
    pub bundles: Vec<DescriptorBundle>,
}

impl Batch {
    pub fn from_samples(samples: &[&Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let images: Vec<&Tensor> = samples.iter().map(|s| s.image.tensor()).collect();
        Ok(Self {
            images: Tensor::stack(&images, 0)?,
            bundles: samples.iter().map(|s| s.bundle.clone()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.bundles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bundles.is_empty()
    }
}

fn prepare_samples(paths: &[PathBuf], size: usize, descriptor: &ExtractionConfig) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(paths.len());
    for path in paths {
        let image = match load_image(path, size) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        let bundle = extract_bundle(&image, descriptor)?.detach();
        out.push(Sample {
            path: path.clone(),
            image,
            bundle,
        });
    }
    Ok(out)
}

/// Loads, crops and extracts descriptors for `paths`; unreadable files are skipped.
pub fn prepare_batch(paths: &[PathBuf], config: &TrainConfig) -> Result<Batch> {
    let samples = prepare_samples(paths, config.image_size, &config.descriptor)?;
    Batch::from_samples(&samples.iter().collect::<Vec<_>>())
}

/// Every training sample, prepared once. Without augmentation descriptors
/// never change between epochs.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn from_paths(paths: &[PathBuf], config: &TrainConfig) -> Result<Self> {
        let samples = prepare_samples(paths, config.image_size, &config.descriptor)?;
        if samples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        Ok(Self { samples })
    }

    pub fn load(config: &TrainConfig) -> Result<Self> {
        Self::from_paths(&list_images(&config.dataset_root)?, config)
    }

    /// Images already at training size.
    pub fn from_images(images: Vec<RgbImage>, descriptor: &ExtractionConfig) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let samples = images
            .into_iter()
            .enumerate()
            .map(|(i, image)| {
                let image = image.to_dtype(DType::F32)?;
                let bundle = extract_bundle(&image, descriptor)?.detach();
                Ok(Sample {
                    path: PathBuf::from(format!("image-{i}")),
                    image,
                    bundle,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices for 0-based `step`: consecutive slices of a per-epoch
    /// shuffle seeded by `(seed, epoch)`. A pure function of its arguments, so
    /// resuming from a checkpoint needs only the step counter.
    pub fn batch_indices(&self, seed: u64, step: usize, batch_size: usize) -> Vec<usize> {
        let n = self.samples.len();
        let mut out = Vec::with_capacity(batch_size);
        let mut cached: Option<(usize, Vec<usize>)> = None;
        for j in 0..batch_size {
            let pos = step * batch_size + j;
            let epoch = pos / n;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut order: Vec<usize> = (0..n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                order.shuffle(&mut rng);
                cached = Some((epoch, order));
            }
            out.push(cached.as_ref().unwrap().1[pos % n]);
        }
        out
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let picked: Vec<&Sample> = indices
            .iter()
            .map(|&i| {
                self.samples.get(i).ok_or(Error::Index {
                    what: "samples",
                    index: i,
                    len: self.samples.len(),
                })
            })
            .collect::<Result<_>>()?;
        Batch::from_samples(&picked)
    }

    /// Batch for 0-based `step` with each image brightness-shifted by a draw
    /// seeded from `(seed, step)` and its descriptors re-extracted.
    pub fn augmented_batch(
        &self,
        indices: &[usize],
        seed: u64,
        step: usize,
        augment: &AugmentConfig,
        descriptor: &ExtractionConfig,
    ) -> Result<Batch> {
        let base = self.batch(indices)?;
        if !augment.enabled() {
            return Ok(base);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_5A5A ^ (step as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
        let samples = indices
            .iter()
            .map(|&i| {
                let delta = rng.random_range(-augment.brightness..=augment.brightness);
                let src = &self.samples[i];
                let image = shift_brightness(&src.image, delta)?;
                let bundle = extract_bundle(&image, descriptor)?.detach();
                Ok(Sample {
                    path: src.path.clone(),
                    image,
                    bundle,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Batch::from_samples(&samples.iter().collect::<Vec<_>>())
    }
}

/// Decoupled-weight-decay Adam over a model's parameters, updated in one fused
/// pass per tensor on host memory.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// `(first, second)` moments by parameter name, flattened.
    pub moments: std::collections::BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl AdamW {
    pub fn new(model: &Model, config: &TrainConfig) -> Result<Self> {
        Ok(Self::for_params(model.params(), config.betas, config.weight_decay))
    }

    /// Zeroed moments for every parameter in `params`.
    pub fn for_params(params: &ParamStore, betas: [f64; 2], weight_decay: f64) -> Self {
        let moments = params
            .iter()
            .map(|(name, v)| (name.clone(), (vec![0.0; v.elem_count()], vec![0.0; v.elem_count()])))
            .collect();
        Self {
            beta1: betas[0],
            beta2: betas[1],
            eps: 1e-8,
            weight_decay,
            moments,
        }
    }

    /// Biases, norms and learned tokens are not decayed.
    pub fn decays(name: &str, rank: usize) -> bool {
        rank >= 2 && !name.ends_with("global_token") && !name.ends_with("hist_tokens.index")
    }

    /// Applies one update with gradients pre-multiplied by `scale`; `step` is
    /// 1-based for bias correction.
    pub fn update(&mut self, params: &ParamStore, grads: &[(String, Vec<f32>)], scale: f64, lr: f64, step: usize) -> Result<()> {
        let bc1 = 1.0 - self.beta1.powi(step as i32);
        let bc2 = 1.0 - self.beta2.powi(step as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for (name, g) in grads {
            let var = params
                .get(name)
                .ok_or_else(|| Error::config(format!("gradient for unknown parameter {name}")))?;
            let (m, v) = self
                .moments
                .get_mut(name)
                .ok_or_else(|| Error::config(format!("no optimizer state for {name}")))?;
            let s = scale as f32;
            for ((mi, vi), gi) in m.iter_mut().zip(v.iter_mut()).zip(g) {
                let gi = gi * s;
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            }
            if lr == 0.0 {
                continue;
            }
            let theta = var.as_tensor();
            let decay = if Self::decays(name, theta.rank()) { self.weight_decay } else { 0.0 };
            let keep = (1.0 - lr * decay) as f32;
            let (a1, a2) = ((lr / bc1) as f32, (1.0 / bc2) as f32);
            let eps = self.eps as f32;
            let mut values = theta.flatten_all()?.to_vec1::<f32>()?;
            for ((x, mi), vi) in values.iter_mut().zip(m.iter()).zip(v.iter()) {
                *x = keep * *x - a1 * mi / ((vi * a2).sqrt() + eps);
            }
            var.set(&Tensor::from_vec(values, theta.dims(), &Device::Cpu)?)?;
        }
        Ok(())
    }
}

/// Everything a run needs to continue bit-identically.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model,
    pub optim: AdamW,
    /// Completed steps.
    pub step: usize,
}

/// Per-step metrics line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub grad_norm: f64,
    #[serde(flatten)]
    pub loss: LossReport,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config.model(), DType::F32, config.seed)?;
        let optim = AdamW::new(&model, config)?;
        Ok(Self {
            config: config.clone(),
            model,
            optim,
            step: 0,
        })
    }

    /// Forward, loss, backward and one AdamW update at `lr_at(step + 1)`.
    /// Nothing changes if the loss or the gradients are not finite.
    pub fn train_step(&mut self, batch: &Batch, objective: &Objective) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let next = self.step + 1;
        let lr = lr_at(next.min(self.config.total_steps), &self.config)?;
        let (_, recon) = self.model.forward(&batch.bundles)?;
        let terms = objective.total(&recon.pixels, &batch.images.to_dtype(self.model.dtype())?, &batch.bundles)?;
        let report = terms.report()?;
        if let Some(component) = report.non_finite() {
            return Err(Error::NonFinite { component });
        }
        let grads = terms.total.backward()?;
        let mut collected = Vec::new();
        let mut sq = 0.0f64;
        for (name, var) in self.model.params().iter() {
            if let Some(g) = grads.get(var.as_tensor()) {
                let g = g.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
                sq += g.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>();
                collected.push((name.clone(), g));
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite { component: "gradient" });
        }
        let scale = (self.config.grad_clip / (norm + 1e-6)).min(1.0);
        self.optim.update(self.model.params(), &collected, scale, lr, next)?;
        self.step = next;
        Ok(StepRecord {
            step: next,
            lr,
            grad_norm: norm,
            loss: report,
        })
    }

    /// Trains until `total_steps` (or `stop` returns true), writing one JSON
    /// line per step to `metrics` and checkpoints into `config.output_dir`.
    pub fn run(
        &mut self,
        data: &Dataset,
        objective: &Objective,
        mut metrics: Option<&mut dyn Write>,
        mut stop: impl FnMut(&TrainState, &StepRecord) -> bool,
        checkpoints: bool,
    ) -> Result<Vec<StepRecord>> {
        let mut records = Vec::new();
        while self.step < self.config.total_steps {
            let idx = data.batch_indices(self.config.seed, self.step, self.config.batch_size);
            let batch = data.augmented_batch(&idx, self.config.seed, self.step, &self.config.augment, &self.config.descriptor)?;
            let record = self.train_step(&batch, objective)?;
            if let Some(w) = metrics.as_deref_mut() {
                writeln!(w, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io("metrics log", e))?;
            }
            log::info!("step {} loss {:.5} lr {:.3e}", record.step, record.loss.total, record.lr);
            let every = self.config.checkpoint_every;
            if checkpoints && every > 0 && self.step.is_multiple_of(every) {
                self.save(&self.config.output_dir.join(format!("step-{:06}.vsck", self.step)))?;
            }
            let done = stop(self, &record);
            records.push(record);
            if done {
                break;
            }
        }
        if checkpoints {
            self.save(&self.config.output_dir.join("final.vsck"))?;
        }
        Ok(records)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        archive::write_file(path, &encode_checkpoint(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        decode_checkpoint(&archive::read_file(path)?, None)
    }

    /// Loads, rejecting a checkpoint whose model differs from `expected`.
    pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Self> {
        decode_checkpoint(&archive::read_file(path)?, Some(expected))
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VSCK";
pub const CHECKPOINT_FORMAT: &str = "VSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    format: String,
    version: u32,
    step: usize,
    /// The run's configuration; batch order is a function of `seed` and `step`.
    config: TrainConfig,
    arrays: Vec<ArrayEntry>,
}

fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let mut arrays = Vec::new();
    for (name, v) in state.model.params().iter() {
        arrays.push(NamedArray::from_tensor(name.clone(), v.as_tensor())?);
    }
    for (name, (m, v)) in &state.optim.moments {
        let shape = state.model.params().get(name).expect("moments follow parameters").dims().to_vec();
        for (which, data) in [("m", m), ("v", v)] {
            arrays.push(NamedArray {
                name: format!("optim/{which}/{name}"),
                shape: shape.clone(),
                data: data.clone(),
            });
        }
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        step: state.step,
        config: state.config.clone(),
        arrays: archive::array_table(&arrays),
    };
    archive::encode(CHECKPOINT_MAGIC, &manifest, &arrays)
}

fn decode_checkpoint(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<TrainState> {
    let (manifest, payload) = archive::split(bytes, CHECKPOINT_MAGIC, CHECKPOINT_FORMAT, CHECKPOINT_VERSION)?;
    let m: CheckpointManifest = serde_json::from_slice(manifest)?;
    if let Some(want) = expected {
        if *want != m.config.model() {
            return Err(Error::config("checkpoint model configuration differs from the requested one"));
        }
    }
    let mut state = TrainState::new(&m.config)?;
    let arrays = archive::decode_arrays(payload, &m.arrays)?;
    let expected_count = state.model.params().len() * 3;
    if arrays.len() != expected_count {
        return Err(Error::Format(format!(
            "checkpoint holds {} arrays, the model needs {expected_count}",
            arrays.len()
        )));
    }
    for a in arrays {
        if let Some(rest) = a.name.strip_prefix("optim/") {
            let (which, name) = rest
                .split_once('/')
                .ok_or_else(|| Error::Format(format!("bad optimizer entry {}", a.name)))?;
            let slot = state
                .optim
                .moments
                .get_mut(name)
                .ok_or_else(|| Error::Format(format!("moments for unknown parameter {name}")))?;
            if slot.0.len() != a.data.len() {
                return Err(Error::shape(format!("{}: {} values vs {}", a.name, a.data.len(), slot.0.len())));
            }
            match which {
                "m" => slot.0 = a.data,
                "v" => slot.1 = a.data,
                _ => return Err(Error::Format(format!("bad optimizer entry {}", a.name))),
            }
        } else {
            state.model.params().set(&a.name, &a.to_tensor(DType::F32)?)?;
        }
    }
    state.step = m.step;
    Ok(state)
}

/// Reads only the model from a checkpoint, for inference.
pub fn load_model(path: &Path) -> Result<Model> {
    Ok(TrainState::load(path)?.model)
}

/// A `(B, 3, S, S)` tensor of `images`, for callers holding loose images.
pub fn stack_images(images: &[RgbImage]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let t: Vec<&Tensor> = images.iter().map(|i| i.tensor()).collect();
    Ok(Tensor::stack(&t, 0)?.to_device(&Device::Cpu)?)
}
