use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::colour::RgbImage;
use crate::decoder::{Decoder, DecoderConfig, Reconstruction};
use crate::descriptors::DescriptorBundle;
use crate::encoder::{EncodedRepresentation, Encoder, EncoderConfig};
use crate::error::Result;
use crate::nn::{Init, ParamStore};

pub const ENCODER_PREFIX: &str = "encoder/";
pub const DECODER_PREFIX: &str = "decoder/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    /// Desk-scale preset for 64x64 experiments: 8-pixel patches, width 192, four blocks.
    pub fn small() -> Self {
        Self {
            encoder: EncoderConfig {
                patch_size: 8,
                embed_dim: 192,
                depth: 4,
                num_heads: 3,
                hist_token_count: 4,
                ..EncoderConfig::default()
            },
            decoder: DecoderConfig {
                embed_dim: 128,
                depth: 2,
                num_heads: 4,
                patch_size: 8,
                ..DecoderConfig::default()
            },
        }
    }

    /// A few hundred thousand parameters; for tests and quick sweeps.
    pub fn tiny() -> Self {
        Self {
            encoder: EncoderConfig {
                patch_size: 8,
                embed_dim: 32,
                depth: 2,
                num_heads: 2,
                hist_token_count: 2,
                ..EncoderConfig::default()
            },
            decoder: DecoderConfig {
                embed_dim: 16,
                depth: 1,
                num_heads: 2,
                patch_size: 8,
                ..DecoderConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate(&self.encoder)
    }
}

/// Encoder and decoder sharing one parameter store (`encoder/...`, `decoder/...`).
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Model {
    pub fn new(config: &ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new(dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&config.encoder, &mut Init::new(&mut params, &mut rng, ENCODER_PREFIX))?;
        let decoder = Decoder::new(
            &config.decoder,
            &config.encoder,
            &mut Init::new(&mut params, &mut rng, DECODER_PREFIX),
        )?;
        Ok(Self {
            config: config.clone(),
            params,
            encoder,
            decoder,
        })
    }

    /// A copy with its own parameter storage. `clone` shares parameters.
    pub fn duplicate(&self) -> Result<Self> {
        let copy = Model::new(&self.config, self.dtype(), 0)?;
        for (name, v) in self.params.iter() {
            copy.params.set(name, &v.as_tensor().copy()?)?;
        }
        Ok(copy)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// Encodes from a `(B, 3, H, W)` spatial map and `(B, N)` histograms.
    pub fn encode_inputs(&self, spatial: &Tensor, hist: &Tensor) -> Result<EncodedRepresentation> {
        let patches = self.encoder.patchify(spatial)?;
        self.encoder.encode(&patches, hist)
    }

    pub fn encode_bundles(&self, bundles: &[DescriptorBundle]) -> Result<EncodedRepresentation> {
        let (spatial, hist) = Encoder::bundle_inputs(bundles, self.dtype())?;
        self.encode_inputs(&spatial, &hist)
    }

    pub fn forward(&self, bundles: &[DescriptorBundle]) -> Result<(EncodedRepresentation, Reconstruction)> {
        let rep = self.encode_bundles(bundles)?;
        let recon = self.decoder.decode(&rep)?;
        Ok((rep, recon))
    }

    /// Reconstructs one image from its descriptors, outside any autograd graph.
    pub fn reconstruct(&self, bundle: &DescriptorBundle) -> Result<RgbImage> {
        let (_, recon) = self.forward(std::slice::from_ref(&bundle.detach()))?;
        RgbImage::new(recon.pixels.get(0)?.detach())
    }
}
