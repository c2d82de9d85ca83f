//! Shallow pixel decoder used during pre-training.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::colour::RgbImage;
use crate::encoder::{EncodedRepresentation, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, sincos_2d, Init, LayerNorm, Linear, PlainBlock, WeightInit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    /// Must equal the encoder's.
    pub patch_size: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 192,
            depth: 2,
            num_heads: 6,
            mlp_ratio: 4.0,
            patch_size: 16,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self, encoder: &EncoderConfig) -> Result<()> {
        if self.depth >= encoder.depth {
            return Err(Error::config(format!(
                "decoder depth {} must be below encoder depth {}",
                self.depth, encoder.depth
            )));
        }
        if self.patch_size != encoder.patch_size {
            return Err(Error::config("decoder and encoder patch sizes differ"));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) || !self.embed_dim.is_multiple_of(4) {
            return Err(Error::config(format!(
                "decoder width {} must split into {} heads and be divisible by 4",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Decoder output, `(B, 3, H, W)` in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub pixels: Tensor,
}

impl Reconstruction {
    pub fn batch_size(&self) -> usize {
        self.pixels.dims()[0]
    }

    pub fn image(&self, i: usize) -> Result<RgbImage> {
        RgbImage::new(self.pixels.get(i)?)
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    config: DecoderConfig,
    local_proj: Linear,
    global_proj: Linear,
    blocks: Vec<PlainBlock>,
    norm: LayerNorm,
    head: Linear,
}

impl Decoder {
    pub fn new(config: &DecoderConfig, encoder: &EncoderConfig, init: &mut Init) -> Result<Self> {
        config.validate(encoder)?;
        let d = config.embed_dim;
        let out = 3 * config.patch_size * config.patch_size;
        Ok(Self {
            config: config.clone(),
            local_proj: Linear::new(init, "local_proj", encoder.embed_dim, d, WeightInit::Xavier)?,
            global_proj: Linear::new(init, "global_proj", encoder.embed_dim, d, WeightInit::Xavier)?,
            blocks: (0..config.depth)
                .map(|i| PlainBlock::new(init, &format!("blocks.{i}"), d, config.num_heads, config.mlp_ratio))
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(init, "norm", d)?,
            head: Linear::new(init, "head", d, out, WeightInit::Xavier)?,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn decode(&self, rep: &EncodedRepresentation) -> Result<Reconstruction> {
        let (b, t, _) = rep.local.dims3()?;
        let (gh, gw) = rep.grid;
        if gh * gw != t || rep.global.dims2()?.0 != b {
            return Err(Error::shape(format!(
                "{t} local tokens do not fill a {gh}x{gw} grid for batch {b}"
            )));
        }
        let pos = sincos_2d(gh, gw, self.config.embed_dim, rep.local.dtype())?;
        let local = self.local_proj.forward(&rep.local)?.broadcast_add(&pos)?;
        let global = self.global_proj.forward(&rep.global)?.unsqueeze(1)?;
        let mut x = Tensor::cat(&[&global, &local], 1)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        let x = self.norm.forward(&x)?.narrow(1, 1, t)?;
        let patches = sigmoid(&self.head.forward(&x)?)?;
        let pixels = Encoder::from_patches(&patches, rep.grid, 3, self.config.patch_size)?;
        Ok(Reconstruction { pixels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::model::{Model, ModelConfig, DECODER_PREFIX, ENCODER_PREFIX};
    use candle_core::DType;

    #[test]
    fn decoder_much_smaller_than_encoder() {
        let m = Model::new(&ModelConfig::default(), DType::F32, 0).unwrap();
        let enc = m.params().count(ENCODER_PREFIX) as f64;
        let dec = m.params().count(DECODER_PREFIX) as f64;
        assert!(dec < 0.35 * enc, "{dec} vs {enc}");
    }

    #[test]
    fn depth_not_below_encoder_rejected() {
        let mut c = ModelConfig::tiny();
        c.decoder.depth = c.encoder.depth;
        assert!(matches!(Model::new(&c, DType::F64, 0), Err(Error::Config(_))));
        let mut c = ModelConfig::tiny();
        c.decoder.patch_size = 4;
        assert!(Model::new(&c, DType::F64, 0).is_err());
    }

    #[test]
    fn output_shape_range_and_determinism() {
        let m = Model::new(&ModelConfig::tiny(), DType::F64, 1).unwrap();
        let spatial = gradcheck::projection(&[2, 3, 16, 24], 3).unwrap();
        let hist = gradcheck::projection(&[2, 100], 4).unwrap().abs().unwrap();
        let rep = m.encode_inputs(&spatial, &hist).unwrap();
        let a = m.decoder.decode(&rep).unwrap();
        assert_eq!(a.pixels.dims(), &[2, 3, 16, 24]);
        let v = a.pixels.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|x| (0.0..=1.0).contains(x)));
        let b = m.decoder.decode(&rep).unwrap();
        assert_eq!(v, b.pixels.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        let bad = EncodedRepresentation { grid: (3, 3), ..rep };
        assert!(matches!(m.decoder.decode(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn pixel_mse_gradient_reaches_encoder_inputs() {
        let m = Model::new(&ModelConfig::tiny(), DType::F64, 2).unwrap();
        let hist = gradcheck::projection(&[1, 100], 5).unwrap().abs().unwrap();
        let target = gradcheck::projection(&[1, 3, 8, 8], 6).unwrap().abs().unwrap().clamp(0.0, 1.0).unwrap();
        let f = |x: &Tensor| -> Result<Tensor> {
            let recon = m.decoder.decode(&m.encode_inputs(x, &hist)?)?;
            Ok((recon.pixels - &target)?.sqr()?.mean_all()?)
        };
        let x = gradcheck::projection(&[1, 3, 8, 8], 7).unwrap();
        let c = gradcheck::check(f, &x, 1e-5).unwrap();
        assert!(c.relative_error() < 1e-5, "{}", c.relative_error());
        assert!(c.analytic.iter().any(|g| g.abs() > 0.0));
    }
}
