//! Classification probes on encoder representations.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{ClassScore, MetricReport};
use crate::colour::RgbImage;
use crate::descriptors::{extract_bundle, DescriptorBundle, ExtractionConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ENCODER_PREFIX};
use crate::nn::{self, Init, Linear, ParamStore, WeightInit};
use crate::training::{list_images, load_image, AdamW};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    /// Encoder frozen; only a linear head is trained.
    Linear,
    /// Encoder and head trained together.
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Representation {
    Global,
    /// Average of the local tokens.
    MeanLocal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub mode: ProbeMode,
    pub representation: Representation,
    pub epochs: usize,
    /// Head learning rate.
    pub lr: f64,
    /// Encoder learning rate in finetune mode.
    pub encoder_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Share of each class used for training; the rest is held out.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            mode: ProbeMode::Linear,
            representation: Representation::Global,
            epochs: 300,
            lr: 1e-2,
            encoder_lr: 1e-4,
            weight_decay: 1e-4,
            batch_size: 16,
            train_fraction: 0.7,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("probe epochs and batch_size must be >= 1"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("train_fraction must lie in (0, 1)"));
        }
        if !(self.lr > 0.0) || self.encoder_lr < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::config("probe learning rates must be positive"));
        }
        Ok(())
    }
}

/// Images with class labels, classes named and ordered.
#[derive(Debug, Clone)]
pub struct LabelledImages {
    pub class_names: Vec<String>,
    pub images: Vec<RgbImage>,
    pub labels: Vec<usize>,
}

impl LabelledImages {
    pub fn new(class_names: Vec<String>, images: Vec<RgbImage>, labels: Vec<usize>) -> Result<Self> {
        check_labels(&class_names, &labels, images.len())?;
        Ok(Self {
            class_names,
            images,
            labels,
        })
    }

    /// One sub-folder per class, in name order; images resized and centre-cropped.
    pub fn load(root: &Path, size: usize) -> Result<Self> {
        let mut dirs: Vec<_> = std::fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        let (mut names, mut images, mut labels) = (Vec::new(), Vec::new(), Vec::new());
        for dir in dirs {
            let label = names.len();
            names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
            for path in list_images(&dir)? {
                match load_image(&path, size) {
                    Ok(img) => {
                        images.push(img);
                        labels.push(label);
                    }
                    Err(e) => log::warn!("skipping {}: {e}", path.display()),
                }
            }
        }
        Self::new(names, images, labels)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn extract(&self, config: &ExtractionConfig) -> Result<ProbeData> {
        let bundles = self
            .images
            .iter()
            .map(|img| extract_bundle(img, config))
            .collect::<Result<Vec<_>>>()?;
        ProbeData::new(self.class_names.clone(), bundles, self.labels.clone())
    }
}

fn check_labels(class_names: &[String], labels: &[usize], n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} samples", labels.len())));
    }
    if class_names.len() < 2 {
        return Err(Error::config("a probe needs at least two classes"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
        return Err(Error::Index {
            what: "classes",
            index: bad,
            len: class_names.len(),
        });
    }
    for (c, name) in class_names.iter().enumerate() {
        if labels.iter().filter(|&&l| l == c).count() < 2 {
            return Err(Error::config(format!("class {name} needs at least two samples")));
        }
    }
    Ok(())
}

/// Descriptor bundles with labels, ready for probing.
#[derive(Debug, Clone)]
pub struct ProbeData {
    pub class_names: Vec<String>,
    pub bundles: Vec<DescriptorBundle>,
    pub labels: Vec<usize>,
}

impl ProbeData {
    pub fn new(class_names: Vec<String>, bundles: Vec<DescriptorBundle>, labels: Vec<usize>) -> Result<Self> {
        check_labels(&class_names, &labels, bundles.len())?;
        Ok(Self {
            class_names,
            bundles,
            labels,
        })
    }

    /// Per-class seeded split into `(train, test)` indices; every class keeps
    /// at least one sample on each side.
    pub fn split(&self, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for c in 0..self.class_names.len() {
            let mut idx: Vec<usize> = (0..self.labels.len()).filter(|&i| self.labels[i] == c).collect();
            idx.shuffle(&mut rng);
            let n = ((idx.len() as f64 * fraction).round() as usize).clamp(1, idx.len() - 1);
            train.extend_from_slice(&idx[..n]);
            test.extend_from_slice(&idx[n..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        (train, test)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport {
    pub mode: ProbeMode,
    pub representation: Representation,
    pub train_size: usize,
    pub test_size: usize,
    pub train_accuracy: f64,
    #[serde(flatten)]
    pub metrics: MetricReport,
    pub encoder_digest_before: String,
    pub encoder_digest_after: String,
}

impl ProbeReport {
    pub fn accuracy(&self) -> f64 {
        self.metrics.accuracy.unwrap_or(0.0)
    }
}

fn representation(model: &Model, bundles: &[DescriptorBundle], which: Representation) -> Result<Tensor> {
    let rep = model.encode_bundles(bundles)?;
    match which {
        Representation::Global => Ok(rep.global),
        Representation::MeanLocal => rep.mean_local(),
    }
}

/// Frozen features for `indices`, `(n, D)` rows in f64.
pub fn features(
    model: &Model,
    data: &ProbeData,
    indices: &[usize],
    which: Representation,
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let bundles: Vec<_> = chunk.iter().map(|&i| data.bundles[i].detach()).collect();
        let f = representation(model, &bundles, which)?.detach();
        out.extend(f.to_dtype(DType::F64)?.to_vec2::<f64>()?);
    }
    Ok(out)
}

fn scores(class_names: &[String], truth: &[usize], predicted: &[usize]) -> (f64, Vec<ClassScore>) {
    let per_class = class_names
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let total = truth.iter().filter(|&&t| t == c).count();
            let correct = truth.iter().zip(predicted).filter(|(&t, &p)| t == c && p == c).count();
            ClassScore {
                class: name.clone(),
                correct,
                total,
                accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            }
        })
        .collect();
    let correct = truth.iter().zip(predicted).filter(|(t, p)| t == p).count();
    (correct as f64 / truth.len().max(1) as f64, per_class)
}

/// Multinomial logistic regression on standardized features, trained with
/// full-batch Adam from zero weights.
#[derive(Debug, Clone)]
pub struct LinearHead {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// `(D, C)` row-major.
    weight: Vec<f64>,
    bias: Vec<f64>,
    classes: usize,
}

impl LinearHead {
    pub fn fit(x: &[Vec<f64>], y: &[usize], classes: usize, config: &ProbeConfig) -> Self {
        let (n, d) = (x.len(), x.first().map_or(0, |r| r.len()));
        let mut mean = vec![0.0; d];
        let mut scale = vec![0.0; d];
        for row in x {
            for j in 0..d {
                mean[j] += row[j] / n as f64;
            }
        }
        for row in x {
            for j in 0..d {
                scale[j] += (row[j] - mean[j]).powi(2) / n as f64;
            }
        }
        // Constant features carry nothing; map them to zero.
        for s in scale.iter_mut() {
            *s = if *s > 1e-24 { 1.0 / s.sqrt() } else { 0.0 };
        }
        let mut head = Self {
            mean,
            scale,
            weight: vec![0.0; d * classes],
            bias: vec![0.0; classes],
            classes,
        };
        let z: Vec<Vec<f64>> = x.iter().map(|r| head.standardize(r)).collect();
        let p = d * classes + classes;
        let (mut m, mut v) = (vec![0.0; p], vec![0.0; p]);
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        for t in 1..=config.epochs {
            let mut grad = vec![0.0; p];
            for (zi, &yi) in z.iter().zip(y) {
                let probs = softmax(&head.logits_std(zi));
                for c in 0..classes {
                    let g = (probs[c] - if c == yi { 1.0 } else { 0.0 }) / n as f64;
                    for j in 0..d {
                        grad[j * classes + c] += g * zi[j];
                    }
                    grad[d * classes + c] += g;
                }
            }
            for k in 0..d * classes {
                grad[k] += config.weight_decay * head.weight[k];
            }
            let (c1, c2) = (1.0 - b1.powi(t as i32), 1.0 - b2.powi(t as i32));
            for k in 0..p {
                m[k] = b1 * m[k] + (1.0 - b1) * grad[k];
                v[k] = b2 * v[k] + (1.0 - b2) * grad[k] * grad[k];
                let step = config.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                if k < d * classes {
                    head.weight[k] -= step;
                } else {
                    head.bias[k - d * classes] -= step;
                }
            }
        }
        head
    }

    fn standardize(&self, row: &[f64]) -> Vec<f64> {
        row.iter().enumerate().map(|(j, v)| (v - self.mean[j]) * self.scale[j]).collect()
    }

    fn logits_std(&self, z: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|c| self.bias[c] + z.iter().enumerate().map(|(j, v)| v * self.weight[j * self.classes + c]).sum::<f64>())
            .collect()
    }

    pub fn predict(&self, row: &[f64]) -> usize {
        argmax(&self.logits_std(&self.standardize(row)))
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn argmax(v: &[f64]) -> usize {
    // First maximum wins, so ties resolve deterministically.
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Trains a linear classifier on the chosen representation and reports
/// held-out top-1 accuracy. Linear mode never touches `model`; finetune mode
/// trains a private copy.
pub fn probe(model: &Model, data: &ProbeData, config: &ProbeConfig) -> Result<ProbeReport> {
    config.validate()?;
    let (train, test) = data.split(config.train_fraction, config.seed);
    let before = model.params().digest(ENCODER_PREFIX)?;
    let classes = data.class_names.len();
    let truth = |idx: &[usize]| idx.iter().map(|&i| data.labels[i]).collect::<Vec<_>>();
    let (train_pred, test_pred, after) = match config.mode {
        ProbeMode::Linear => {
            let xtr = features(model, data, &train, config.representation, config.batch_size)?;
            let xte = features(model, data, &test, config.representation, config.batch_size)?;
            let head = LinearHead::fit(&xtr, &truth(&train), classes, config);
            let after = model.params().digest(ENCODER_PREFIX)?;
            if after != before {
                return Err(Error::config("linear probe modified the encoder"));
            }
            let tr = xtr.iter().map(|r| head.predict(r)).collect::<Vec<_>>();
            let te = xte.iter().map(|r| head.predict(r)).collect::<Vec<_>>();
            (tr, te, after)
        }
        ProbeMode::Finetune => {
            let tuned = model.duplicate()?;
            let head = finetune(&tuned, data, &train, config)?;
            let tr = head.predict(&tuned, data, &train, config)?;
            let te = head.predict(&tuned, data, &test, config)?;
            (tr, te, tuned.params().digest(ENCODER_PREFIX)?)
        }
    };
    let (train_accuracy, _) = scores(&data.class_names, &truth(&train), &train_pred);
    let (accuracy, per_class) = scores(&data.class_names, &truth(&test), &test_pred);
    Ok(ProbeReport {
        mode: config.mode,
        representation: config.representation,
        train_size: train.len(),
        test_size: test.len(),
        train_accuracy,
        metrics: MetricReport {
            accuracy: Some(accuracy),
            per_class,
            ..MetricReport::default()
        },
        encoder_digest_before: before,
        encoder_digest_after: after,
    })
}

struct TunedHead {
    params: ParamStore,
    linear: Linear,
}

impl TunedHead {
    fn logits(&self, model: &Model, bundles: &[DescriptorBundle], which: Representation) -> Result<Tensor> {
        let f = nn::layer_norm(&representation(model, bundles, which)?)?;
        self.linear.forward(&f)
    }

    fn predict(&self, model: &Model, data: &ProbeData, idx: &[usize], config: &ProbeConfig) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for chunk in idx.chunks(config.batch_size) {
            let bundles: Vec<_> = chunk.iter().map(|&i| data.bundles[i].detach()).collect();
            let logits = self.logits(model, &bundles, config.representation)?.detach();
            out.extend(logits.to_dtype(DType::F64)?.to_vec2::<f64>()?.iter().map(|r| argmax(r)));
        }
        Ok(out)
    }
}

fn collect_grads(params: &ParamStore, grads: &candle_core::backprop::GradStore) -> Result<(Vec<(String, Vec<f32>)>, f64)> {
    let mut out = Vec::new();
    let mut sq = 0.0;
    for (name, var) in params.iter() {
        if let Some(g) = grads.get(var.as_tensor()) {
            let g = g.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            sq += g.iter().map(|x| (*x as f64).powi(2)).sum::<f64>();
            out.push((name.clone(), g));
        }
    }
    Ok((out, sq))
}

fn finetune(model: &Model, data: &ProbeData, train: &[usize], config: &ProbeConfig) -> Result<TunedHead> {
    let classes = data.class_names.len();
    let dim = model.config().encoder.embed_dim;
    let mut params = ParamStore::new(model.dtype());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let linear = Linear::new(&mut Init::new(&mut params, &mut rng, "head/"), "linear", dim, classes, WeightInit::Xavier)?;
    let head = TunedHead { params, linear };
    let mut enc_opt = AdamW::for_params(model.params(), [0.9, 0.999], config.weight_decay);
    let mut head_opt = AdamW::for_params(&head.params, [0.9, 0.999], config.weight_decay);
    let mut order = train.to_vec();
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64 + 1)));
        for chunk in order.chunks(config.batch_size) {
            let bundles: Vec<_> = chunk.iter().map(|&i| data.bundles[i].detach()).collect();
            let logits = head.logits(model, &bundles, config.representation)?;
            let onehot: Vec<f32> = chunk
                .iter()
                .flat_map(|&i| (0..classes).map(move |c| if data.labels[i] == c { 1.0 } else { 0.0 }))
                .collect();
            let onehot = Tensor::from_vec(onehot, (chunk.len(), classes), &Device::Cpu)?.to_dtype(logits.dtype())?;
            let loss = (onehot * log_softmax(&logits)?)?.sum_all()?.affine(-1.0 / chunk.len() as f64, 0.0)?;
            let grads = loss.backward()?;
            let (eg, esq) = collect_grads(model.params(), &grads)?;
            let (hg, hsq) = collect_grads(&head.params, &grads)?;
            let norm = (esq + hsq).sqrt();
            if !norm.is_finite() {
                return Err(Error::NonFinite { component: "gradient" });
            }
            let scale = (1.0 / (norm + 1e-6)).min(1.0);
            step += 1;
            enc_opt.update(model.params(), &eg, scale, config.encoder_lr, step)?;
            head_opt.update(&head.params, &hg, scale, config.lr, step)?;
        }
    }
    Ok(head)
}

fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let top = x.max_keepdim(1)?.detach();
    let shifted = x.broadcast_sub(&top)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}
