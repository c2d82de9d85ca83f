//! Pre-training objective: pixel MSE, a perceptual feature distance and the
//! descriptor-consistency terms computed on descriptors re-extracted from the
//! reconstruction.

use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::archive::{self, ArrayEntry, NamedArray};
use crate::colour::{rgb_to_lab, RgbImage};
use crate::descriptors::{
    extract_edges, extract_histogram, render_ab, resegment_from, DescriptorBundle, AB_SCALE,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerceptualMode {
    Off,
    RandomFeatures,
    PretrainedFeatures,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub w_pixel: f64,
    pub w_perceptual: f64,
    pub w_edge: f64,
    pub w_hist: f64,
    pub w_colour: f64,
    /// Stabilizer in the histogram term's denominator.
    pub epsilon: f64,
    pub perceptual_mode: PerceptualMode,
    /// Seed of the frozen random feature extractor.
    pub perceptual_seed: u64,
    /// Weights file for `pretrained_features`.
    pub perceptual_weights: Option<PathBuf>,
    /// How the L1 edge and colour terms reduce over elements.
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            w_pixel: 1.0,
            w_perceptual: 0.5,
            w_edge: 0.2,
            w_hist: 0.2,
            w_colour: 0.2,
            epsilon: 1e-6,
            perceptual_mode: PerceptualMode::RandomFeatures,
            perceptual_seed: 0,
            perceptual_weights: None,
            reduction: Reduction::Mean,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> [f64; 5] {
        [self.w_pixel, self.w_perceptual, self.w_edge, self.w_hist, self.w_colour]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.weights();
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        if w.iter().all(|v| *v == 0.0) {
            return Err(Error::config("at least one loss weight must be positive"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon must be positive"));
        }
        if self.w_perceptual > 0.0 && self.perceptual_mode == PerceptualMode::Off {
            return Err(Error::config("perceptual weight is set but perceptual_mode is off"));
        }
        Ok(())
    }
}

const PYRAMID: [(usize, usize, usize); 3] = [(3, 16, 1), (16, 32, 2), (32, 64, 2)];
const PYRAMID_MAGIC: &[u8; 4] = b"VSPF";
const PYRAMID_FORMAT: &str = "VSPF";

/// A frozen three-stage 3x3 convolution stack with ReLU.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    layers: Vec<(Tensor, Tensor, usize)>,
}

#[derive(Serialize, Deserialize)]
struct PyramidManifest {
    format: String,
    version: u32,
    arrays: Vec<ArrayEntry>,
}

impl FeaturePyramid {
    /// He-normal weights from a fixed seed.
    pub fn random(seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for (cin, cout, stride) in PYRAMID {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let dist = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
            let w: Vec<f64> = (0..cout * cin * 9).map(|_| dist.sample(&mut rng)).collect();
            layers.push((
                Tensor::from_vec(w, (cout, cin, 3, 3), &Device::Cpu)?,
                Tensor::zeros(cout, DType::F64, &Device::Cpu)?,
                stride,
            ));
        }
        Ok(Self { layers })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut arrays = Vec::new();
        for (i, (w, b, _)) in self.layers.iter().enumerate() {
            arrays.push(NamedArray::from_tensor(format!("conv{i}.weight"), w)?);
            arrays.push(NamedArray::from_tensor(format!("conv{i}.bias"), b)?);
        }
        let m = PyramidManifest {
            format: PYRAMID_FORMAT.into(),
            version: 1,
            arrays: archive::array_table(&arrays),
        };
        archive::write_file(path, &archive::encode(PYRAMID_MAGIC, &m, &arrays)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = archive::read_file(path)?;
        let (manifest, payload) = archive::split(&bytes, PYRAMID_MAGIC, PYRAMID_FORMAT, 1)?;
        let m: PyramidManifest = serde_json::from_slice(manifest)?;
        let arrays = archive::decode_arrays(payload, &m.arrays)?;
        if arrays.len() != 2 * PYRAMID.len() {
            return Err(Error::Format("feature weights need one weight and bias per stage".into()));
        }
        let mut layers = Vec::new();
        for (i, (cin, cout, stride)) in PYRAMID.into_iter().enumerate() {
            let (w, b) = (&arrays[2 * i], &arrays[2 * i + 1]);
            if w.shape != [cout, cin, 3, 3] || b.shape != [cout] {
                return Err(Error::Format(format!("stage {i} weights have the wrong shape")));
            }
            layers.push((w.to_tensor(DType::F64)?, b.to_tensor(DType::F64)?, stride));
        }
        Ok(Self { layers })
    }

    /// Feature maps of every stage for a `(B, 3, H, W)` batch in `[0, 1]`.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let dtype = x.dtype();
        let mut h = x.affine(2.0, -1.0)?;
        let mut out = Vec::with_capacity(self.layers.len());
        for (w, b, stride) in &self.layers {
            h = h
                .conv2d(&w.to_dtype(dtype)?, 1, *stride, 1, 1)?
                .broadcast_add(&b.to_dtype(dtype)?.reshape((1, (), 1, 1))?)?
                .relu()?;
            out.push(h.clone());
        }
        Ok(out)
    }

    /// Mean over stages of the mean squared feature difference.
    pub fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let fa = self.features(a)?;
        let fb = self.features(b)?;
        let mut total: Option<Tensor> = None;
        for (x, y) in fa.iter().zip(&fb) {
            let d = (x - y)?.sqr()?.mean_all()?;
            total = Some(match total {
                None => d,
                Some(t) => (t + d)?,
            });
        }
        Ok((total.expect("pyramid has stages") / self.layers.len() as f64)?)
    }
}

fn batch_of(t: &Tensor) -> Result<Tensor> {
    Ok(match t.rank() {
        3 => t.unsqueeze(0)?,
        _ => t.clone(),
    })
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Mean squared error over every pixel and channel.
pub fn pixel_loss(recon: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape(recon, target)?;
    Ok((recon - target)?.sqr()?.mean_all()?)
}

/// The loss-side state that is built once: the frozen feature extractor.
#[derive(Debug, Clone)]
pub struct Objective {
    config: LossConfig,
    features: Option<FeaturePyramid>,
}

impl Objective {
    pub fn new(config: &LossConfig) -> Result<Self> {
        config.validate()?;
        let features = match config.perceptual_mode {
            PerceptualMode::Off => None,
            PerceptualMode::RandomFeatures => Some(FeaturePyramid::random(config.perceptual_seed)?),
            PerceptualMode::PretrainedFeatures => {
                let path = config
                    .perceptual_weights
                    .as_ref()
                    .ok_or_else(|| Error::config("pretrained_features needs perceptual_weights"))?;
                Some(FeaturePyramid::load(path)?)
            }
        };
        Ok(Self {
            config: config.clone(),
            features,
        })
    }

    pub fn config(&self) -> &LossConfig {
        &self.config
    }

    /// Feature-space distance; rejected when the perceptual mode is off.
    pub fn perceptual_loss(&self, recon: &Tensor, target: &Tensor) -> Result<Tensor> {
        same_shape(recon, target)?;
        let f = self
            .features
            .as_ref()
            .ok_or_else(|| Error::config("perceptual loss requested with perceptual_mode off"))?;
        f.distance(&batch_of(recon)?, &batch_of(target)?)
    }

    /// `(L_e, L_g, L_c)` for one `(3, H, W)` reconstruction against its bundle.
    pub fn descriptor_consistency(&self, recon: &RgbImage, bundle: &DescriptorBundle) -> Result<(Tensor, Tensor, Tensor)> {
        if (recon.height(), recon.width()) != (bundle.height(), bundle.width()) {
            return Err(Error::shape(format!(
                "reconstruction {}x{} vs bundle {}x{}",
                recon.height(),
                recon.width(),
                bundle.height(),
                bundle.width()
            )));
        }
        let reference = bundle.to_dtype(recon.dtype())?;
        let cfg = &reference.config;
        let lab = rgb_to_lab(recon)?;
        let edges = extract_edges(&lab)?;
        let edge = self.l1(&reference.edges.magnitude, &edges.magnitude)?;
        let hist = extract_histogram(&lab, cfg.num_bins, cfg.bandwidth)?;
        let hist = histogram_term(&reference.histogram.weights, &hist.weights, self.config.epsilon)?;
        let seg = resegment_from(&lab, &reference.segmentation, cfg.iterations)?;
        let colour = self.l1(
            &(render_ab(&reference.segmentation)? / AB_SCALE)?,
            &(render_ab(&seg)? / AB_SCALE)?,
        )?;
        Ok((edge, hist, colour))
    }

    fn l1(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        l1_term(a, b, self.config.reduction)
    }

    /// Weighted sum of all terms over a batch; descriptor terms are averaged
    /// over images.
    pub fn total(&self, recon: &Tensor, target: &Tensor, bundles: &[DescriptorBundle]) -> Result<LossTerms> {
        let recon = batch_of(recon)?;
        let target = batch_of(target)?;
        same_shape(&recon, &target)?;
        let b = recon.dims()[0];
        if bundles.len() != b {
            return Err(Error::shape(format!("{b} reconstructions but {} bundles", bundles.len())));
        }
        let zero = Tensor::zeros((), recon.dtype(), &Device::Cpu)?;
        let c = &self.config;
        let pixel = pixel_loss(&recon, &target)?;
        let perceptual = if c.w_perceptual > 0.0 {
            self.perceptual_loss(&recon, &target)?
        } else {
            zero.clone()
        };
        let (mut edge, mut hist, mut colour) = (zero.clone(), zero.clone(), zero.clone());
        if c.w_edge > 0.0 || c.w_hist > 0.0 || c.w_colour > 0.0 {
            for (i, bundle) in bundles.iter().enumerate() {
                let (e, g, col) = self.descriptor_consistency(&RgbImage::new(recon.get(i)?)?, bundle)?;
                edge = (edge + e)?;
                hist = (hist + g)?;
                colour = (colour + col)?;
            }
            edge = (edge / b as f64)?;
            hist = (hist / b as f64)?;
            colour = (colour / b as f64)?;
        }
        let total = (pixel.affine(c.w_pixel, 0.0)?
            + perceptual.affine(c.w_perceptual, 0.0)?
            + edge.affine(c.w_edge, 0.0)?
            + hist.affine(c.w_hist, 0.0)?
            + colour.affine(c.w_colour, 0.0)?)?;
        Ok(LossTerms {
            total,
            pixel,
            perceptual,
            edge,
            hist,
            colour,
        })
    }
}

pub fn l1_term(a: &Tensor, b: &Tensor, reduction: Reduction) -> Result<Tensor> {
    same_shape(a, b)?;
    let d = (a - b)?.abs()?;
    Ok(match reduction {
        Reduction::Mean => d.mean_all()?,
        Reduction::Sum => d.sum_all()?,
    })
}

/// `(1/N) sum_i (d_i - e_i)^2 / (d_i + e_i + eps)`
pub fn histogram_term(d: &Tensor, d_hat: &Tensor, epsilon: f64) -> Result<Tensor> {
    same_shape(d, d_hat)?;
    let num = (d - d_hat)?.sqr()?;
    let den = (d + d_hat)?.affine(1.0, epsilon)?;
    Ok(num.div(&den)?.mean_all()?)
}

/// Differentiable loss components of one step.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Tensor,
    pub pixel: Tensor,
    pub perceptual: Tensor,
    pub edge: Tensor,
    pub hist: Tensor,
    pub colour: Tensor,
}

impl LossTerms {
    pub fn report(&self) -> Result<LossReport> {
        let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(LossReport {
            total: v(&self.total)?,
            pixel: v(&self.pixel)?,
            perceptual: v(&self.perceptual)?,
            edge: v(&self.edge)?,
            hist: v(&self.hist)?,
            colour: v(&self.colour)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub pixel: f64,
    pub perceptual: f64,
    pub edge: f64,
    pub hist: f64,
    pub colour: f64,
}

impl LossReport {
    pub fn components(&self) -> [(&'static str, f64); 5] {
        [
            ("pixel", self.pixel),
            ("perceptual", self.perceptual),
            ("edge", self.edge),
            ("hist", self.hist),
            ("colour", self.colour),
        ]
    }

    /// The first non-finite component, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        self.components()
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
            .or((!self.total.is_finite()).then_some("total"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_slice(v, v.len(), &Device::Cpu).unwrap()
    }

    fn scalar(x: Tensor) -> f64 {
        x.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn histogram_term_two_bin_toy() {
        let eps = 1e-6;
        let got = scalar(histogram_term(&t(&[1.0, 0.0]), &t(&[0.0, 1.0]), eps).unwrap());
        // (1/2) * (1/(1+eps) + 1/(1+eps))
        let want = 0.5 * (1.0 / (1.0 + eps) + 1.0 / (1.0 + eps));
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.999999).abs() < 1e-6);
    }

    #[test]
    fn l1_constant_offset() {
        let a: Vec<f64> = (0..20).map(|i| i as f64 * 0.01).collect();
        let b: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
        assert!((scalar(l1_term(&t(&a), &t(&b), Reduction::Mean).unwrap()) - 0.1).abs() < 1e-9);
        assert!((scalar(l1_term(&t(&a), &t(&b), Reduction::Sum).unwrap()) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn pixel_loss_constant_offset() {
        let a = Tensor::full(0.3f64, (3, 4, 4), &Device::Cpu).unwrap();
        let b = (&a + 0.1).unwrap();
        assert!((scalar(pixel_loss(&b, &a).unwrap()) - 0.01).abs() < 1e-12);
        assert_eq!(scalar(pixel_loss(&a, &a).unwrap()), 0.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Tensor::zeros((3, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let b = Tensor::zeros((3, 4, 5), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(pixel_loss(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = LossConfig { w_pixel: 0.0, w_perceptual: 0.0, w_edge: 0.0, w_hist: 0.0, w_colour: 0.0, ..LossConfig::default() };
        assert!(c.validate().is_err());
        c.w_pixel = 1.0;
        assert!(c.validate().is_ok());
        c.w_perceptual = 0.5;
        c.perceptual_mode = PerceptualMode::Off;
        assert!(c.validate().is_err());
        let pretrained = LossConfig { perceptual_mode: PerceptualMode::PretrainedFeatures, ..LossConfig::default() };
        assert!(matches!(Objective::new(&pretrained), Err(Error::Config(_))));
    }

    #[test]
    fn perceptual_rejected_when_off() {
        let c = LossConfig { w_perceptual: 0.0, perceptual_mode: PerceptualMode::Off, ..LossConfig::default() };
        let obj = Objective::new(&c).unwrap();
        let a = Tensor::zeros((1, 3, 8, 8), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(obj.perceptual_loss(&a, &a), Err(Error::Config(_))));
    }

    #[test]
    fn pyramid_weights_roundtrip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.vspf");
        let p = FeaturePyramid::random(4).unwrap();
        p.save(&path).unwrap();
        let c = LossConfig {
            perceptual_mode: PerceptualMode::PretrainedFeatures,
            perceptual_weights: Some(path),
            ..LossConfig::default()
        };
        let obj = Objective::new(&c).unwrap();
        let a = Tensor::rand(0f64, 1.0, (1, 3, 8, 8), &Device::Cpu).unwrap();
        let b = Tensor::rand(0f64, 1.0, (1, 3, 8, 8), &Device::Cpu).unwrap();
        let stored = scalar(obj.perceptual_loss(&a, &b).unwrap());
        // weights went through f32
        let direct = scalar(p.distance(&a, &b).unwrap());
        assert!((stored - direct).abs() < 1e-5 * direct.max(1.0));
    }
}
