//! Descriptor encoder: a ViT over patchified edge + colour maps, conditioned on
//! the grey-level histogram through AdaLN-Zero blocks and cross-attention blocks.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::descriptors::DescriptorBundle;
use crate::error::{Error, Result};
use crate::nn::{layer_norm, sincos_2d, CrossAttention, Init, LayerNorm, Linear, Mlp, SelfAttention, WeightInit};

/// Spatial input channels: edge magnitude, a, b.
pub const INPUT_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    AdalnBlock,
    CrossattnBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    /// Tokens the histogram is projected into for cross-attention.
    pub hist_token_count: usize,
    /// Length of the histograms this encoder accepts.
    pub num_bins: usize,
    /// Empty means strict alternation starting with an AdaLN block.
    pub block_pattern: Vec<BlockKind>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 16,
            embed_dim: 384,
            depth: 8,
            num_heads: 6,
            mlp_ratio: 4.0,
            hist_token_count: 8,
            num_bins: 100,
            block_pattern: Vec::new(),
        }
    }
}

impl EncoderConfig {
    /// ViT-Base widths.
    pub fn base() -> Self {
        Self {
            embed_dim: 768,
            depth: 12,
            num_heads: 12,
            ..Self::default()
        }
    }

    pub fn pattern(&self) -> Vec<BlockKind> {
        if !self.block_pattern.is_empty() {
            return self.block_pattern.clone();
        }
        (0..self.depth)
            .map(|i| {
                if i % 2 == 0 {
                    BlockKind::AdalnBlock
                } else {
                    BlockKind::CrossattnBlock
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.num_heads == 0 || self.hist_token_count == 0 {
            return Err(Error::config("patch size, heads and histogram tokens must be positive"));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if !self.embed_dim.is_multiple_of(4) {
            return Err(Error::config("embed_dim must be divisible by 4 for 2-D position encoding"));
        }
        let pattern = self.pattern();
        if pattern.len() != self.depth {
            return Err(Error::config(format!(
                "block pattern has {} entries for depth {}",
                pattern.len(),
                self.depth
            )));
        }
        if !pattern.contains(&BlockKind::AdalnBlock) || !pattern.contains(&BlockKind::CrossattnBlock) {
            return Err(Error::config("block pattern needs at least one block of each kind"));
        }
        Ok(())
    }

    pub fn check_image_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if height == 0 || width == 0 || !height.is_multiple_of(self.patch_size) || !width.is_multiple_of(self.patch_size) {
            return Err(Error::shape(format!(
                "{height}x{width} is not a multiple of patch size {}",
                self.patch_size
            )));
        }
        Ok((height / self.patch_size, width / self.patch_size))
    }
}

/// Embedded patches with position encodings, `(B, T, D)`.
#[derive(Debug, Clone)]
pub struct PatchTokens {
    pub tokens: Tensor,
    pub grid: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct EncodedRepresentation {
    /// `(B, D)` output of the global token.
    pub global: Tensor,
    /// `(B, T, D)` patch token outputs, row-major over `grid`.
    pub local: Tensor,
    pub grid: (usize, usize),
}

impl EncodedRepresentation {
    pub fn mean_local(&self) -> Result<Tensor> {
        Ok(self.local.mean(1)?)
    }
}

/// `(r, beta, g)` pairs for the attention and MLP branches of one AdaLN block.
#[derive(Debug, Clone)]
pub struct Modulation {
    pub shift_attn: Tensor,
    pub scale_attn: Tensor,
    pub gate_attn: Tensor,
    pub shift_mlp: Tensor,
    pub scale_mlp: Tensor,
    pub gate_mlp: Tensor,
}

#[derive(Debug, Clone)]
pub struct AdaLnBlock {
    attn: SelfAttention,
    mlp: Mlp,
    pub modulation: Linear,
}

impl AdaLnBlock {
    fn new(init: &mut Init, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        let mut p = init.sub(name);
        Ok(Self {
            attn: SelfAttention::new(&mut p, "attn", d, cfg.num_heads)?,
            mlp: Mlp::new(&mut p, "mlp", d, (d as f64 * cfg.mlp_ratio) as usize)?,
            // zero init: every block starts as the identity
            modulation: Linear::new(&mut p, "modulation", d, 6 * d, WeightInit::Zero)?,
        })
    }

    /// `cond` is the `(B, D)` histogram embedding.
    pub fn modulation(&self, cond: &Tensor) -> Result<Modulation> {
        let m = self.modulation.forward(&cond.silu()?)?.unsqueeze(1)?;
        let parts = m.chunk(6, 2)?;
        Ok(Modulation {
            shift_attn: parts[0].clone(),
            scale_attn: parts[1].clone(),
            gate_attn: parts[2].clone(),
            shift_mlp: parts[3].clone(),
            scale_mlp: parts[4].clone(),
            gate_mlp: parts[5].clone(),
        })
    }

    pub fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let m = self.modulation(cond)?;
        let modulate = |h: &Tensor, shift: &Tensor, scale: &Tensor| -> Result<Tensor> {
            Ok(layer_norm(h)?
                .broadcast_mul(&(scale + 1.0)?)?
                .broadcast_add(shift)?)
        };
        let h = self.attn.forward(&modulate(x, &m.shift_attn, &m.scale_attn)?)?;
        let x = (x + h.broadcast_mul(&m.gate_attn)?)?;
        let h = self.mlp.forward(&modulate(&x, &m.shift_mlp, &m.scale_mlp)?)?;
        Ok((&x + h.broadcast_mul(&m.gate_mlp)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct CrossAttnBlock {
    norm1: LayerNorm,
    attn: SelfAttention,
    norm2: LayerNorm,
    norm_context: LayerNorm,
    pub cross: CrossAttention,
    norm3: LayerNorm,
    mlp: Mlp,
}

impl CrossAttnBlock {
    fn new(init: &mut Init, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        let mut p = init.sub(name);
        Ok(Self {
            norm1: LayerNorm::new(&mut p, "norm1", d)?,
            attn: SelfAttention::new(&mut p, "attn", d, cfg.num_heads)?,
            norm2: LayerNorm::new(&mut p, "norm2", d)?,
            norm_context: LayerNorm::new(&mut p, "norm_context", d)?,
            cross: CrossAttention::new(&mut p, "cross", d, cfg.num_heads)?,
            norm3: LayerNorm::new(&mut p, "norm3", d)?,
            mlp: Mlp::new(&mut p, "mlp", d, (d as f64 * cfg.mlp_ratio) as usize)?,
        })
    }

    /// `context` holds the `(B, M, D)` histogram tokens.
    pub fn forward(&self, x: &Tensor, context: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        let ctx = self.norm_context.forward(context)?;
        let x = (&x + self.cross.forward(&self.norm2.forward(&x)?, &ctx)?)?;
        Ok((&x + self.mlp.forward(&self.norm3.forward(&x)?)?)?)
    }
}

#[derive(Debug, Clone)]
pub enum Block {
    Adaln(AdaLnBlock),
    CrossAttn(CrossAttnBlock),
}

#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    patch_embed: Linear,
    global_token: candle_core::Var,
    hist_embed_1: Linear,
    hist_embed_2: Linear,
    hist_tokens: Linear,
    hist_token_index: candle_core::Var,
    pub blocks: Vec<Block>,
    norm: LayerNorm,
}

impl Encoder {
    pub fn new(config: &EncoderConfig, init: &mut Init) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let p = config.patch_size;
        let n = config.num_bins;
        let m = config.hist_token_count;
        let patch_embed = Linear::new(init, "patch_embed", INPUT_CHANNELS * p * p, d, WeightInit::Xavier)?;
        let global_token = init.normal("global_token", &[1, 1, d], 0.02)?;
        let hist_embed_1 = Linear::new(init, "hist_embed.fc1", n, d, WeightInit::Xavier)?;
        let hist_embed_2 = Linear::new(init, "hist_embed.fc2", d, d, WeightInit::Xavier)?;
        let hist_tokens = Linear::new(init, "hist_tokens.proj", n, m * d, WeightInit::Xavier)?;
        let hist_token_index = init.normal("hist_tokens.index", &[1, m, d], 0.02)?;
        let blocks = config
            .pattern()
            .into_iter()
            .enumerate()
            .map(|(i, kind)| {
                let name = format!("blocks.{i}");
                Ok(match kind {
                    BlockKind::AdalnBlock => Block::Adaln(AdaLnBlock::new(init, &name, config)?),
                    BlockKind::CrossattnBlock => Block::CrossAttn(CrossAttnBlock::new(init, &name, config)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(init, "norm", d)?;
        Ok(Self {
            config: config.clone(),
            patch_embed,
            global_token,
            hist_embed_1,
            hist_embed_2,
            hist_tokens,
            hist_token_index,
            blocks,
            norm,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Splits a `(B, C, H, W)` map into row-major `(B, T, C * p * p)` patch vectors.
    pub fn to_patches(x: &Tensor, patch: usize) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (gh, gw) = (h / patch, w / patch);
        Ok(x.reshape((b, c, gh, patch, gw, patch))?
            .permute((0, 2, 4, 1, 3, 5))?
            .contiguous()?
            .reshape((b, gh * gw, c * patch * patch))?)
    }

    /// Inverse of [`Encoder::to_patches`].
    pub fn from_patches(x: &Tensor, grid: (usize, usize), channels: usize, patch: usize) -> Result<Tensor> {
        let (b, _, _) = x.dims3()?;
        let (gh, gw) = grid;
        Ok(x.reshape((b, gh, gw, channels, patch, patch))?
            .permute((0, 3, 1, 4, 2, 5))?
            .contiguous()?
            .reshape((b, channels, gh * patch, gw * patch))?)
    }

    /// Embeds the `(B, 3, H, W)` spatial descriptor map.
    pub fn patchify(&self, input: &Tensor) -> Result<PatchTokens> {
        let (_, c, h, w) = input.dims4()?;
        if c != INPUT_CHANNELS {
            return Err(Error::shape(format!("expected {INPUT_CHANNELS} input channels, got {c}")));
        }
        let grid = self.config.check_image_size(h, w)?;
        let patches = Self::to_patches(input, self.config.patch_size)?;
        let pos = sincos_2d(grid.0, grid.1, self.config.embed_dim, input.dtype())?;
        let tokens = self.patch_embed.forward(&patches)?.broadcast_add(&pos)?;
        Ok(PatchTokens { tokens, grid })
    }

    /// Patchifies an edge map `(H, W)` and a colour render `(H, W, 2)` of one image.
    pub fn patchify_maps(&self, edges: &Tensor, ab_render: &Tensor) -> Result<PatchTokens> {
        let (h, w) = edges.dims2()?;
        let (rh, rw, two) = ab_render.dims3()?;
        if (h, w) != (rh, rw) || two != 2 {
            return Err(Error::shape(format!(
                "edge map {h}x{w} and colour render {rh}x{rw}x{two} do not line up"
            )));
        }
        let ab = (ab_render.permute((2, 0, 1))? / crate::descriptors::AB_SCALE)?;
        let input = Tensor::cat(&[&edges.unsqueeze(0)?, &ab], 0)?.unsqueeze(0)?;
        self.patchify(&input)
    }

    fn check_hist(&self, hist: &Tensor) -> Result<()> {
        let (_, n) = hist.dims2()?;
        if n != self.config.num_bins {
            return Err(Error::shape(format!(
                "histogram has {n} bins, encoder expects {}",
                self.config.num_bins
            )));
        }
        Ok(())
    }

    /// Histogram scaled to unit mean so the first layer sees O(1) inputs.
    fn scaled_hist(&self, hist: &Tensor) -> Result<Tensor> {
        self.check_hist(hist)?;
        Ok((hist * self.config.num_bins as f64)?)
    }

    /// `(B, N)` histograms -> `(B, M, D)` key/value tokens.
    pub fn tokenize_histogram(&self, hist: &Tensor) -> Result<Tensor> {
        let (b, _) = hist.dims2()?;
        let t = self
            .hist_tokens
            .forward(&self.scaled_hist(hist)?)?
            .reshape((b, self.config.hist_token_count, self.config.embed_dim))?;
        Ok(t.broadcast_add(self.hist_token_index.as_tensor())?)
    }

    /// `(B, N)` histograms -> `(B, D)` conditioning vector for the AdaLN blocks.
    pub fn histogram_embedding(&self, hist: &Tensor) -> Result<Tensor> {
        let h = self.hist_embed_1.forward(&self.scaled_hist(hist)?)?.silu()?;
        self.hist_embed_2.forward(&h)
    }

    /// Runs only the blocks, on tokens that already include the global token.
    pub fn run_blocks(&self, x: &Tensor, hist: &Tensor) -> Result<Tensor> {
        let cond = self.histogram_embedding(hist)?;
        let context = self.tokenize_histogram(hist)?;
        let mut x = x.clone();
        for block in &self.blocks {
            x = match block {
                Block::Adaln(b) => b.forward(&x, &cond)?,
                Block::CrossAttn(b) => b.forward(&x, &context)?,
            };
        }
        Ok(x)
    }

    pub fn encode(&self, patches: &PatchTokens, hist: &Tensor) -> Result<EncodedRepresentation> {
        let (b, t, d) = patches.tokens.dims3()?;
        if hist.dims2()?.0 != b {
            return Err(Error::shape("batch sizes of patches and histograms differ"));
        }
        let global = self.global_token.as_tensor().broadcast_as((b, 1, d))?;
        let x = Tensor::cat(&[&global, &patches.tokens], 1)?;
        let x = self.norm.forward(&self.run_blocks(&x, hist)?)?;
        Ok(EncodedRepresentation {
            global: x.narrow(1, 0, 1)?.squeeze(1)?,
            local: x.narrow(1, 1, t)?,
            grid: patches.grid,
        })
    }

    /// Spatial input and histograms for a batch of bundles. Nothing but descriptor
    /// fields reaches the encoder.
    pub fn bundle_inputs(bundles: &[DescriptorBundle], dtype: DType) -> Result<(Tensor, Tensor)> {
        if bundles.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let spatial = bundles
            .iter()
            .map(|b| b.spatial_input()?.to_dtype(dtype).map_err(Error::from))
            .collect::<Result<Vec<_>>>()?;
        let hists = bundles
            .iter()
            .map(|b| b.histogram.weights.to_dtype(dtype).map_err(Error::from))
            .collect::<Result<Vec<_>>>()?;
        Ok((Tensor::stack(&spatial, 0)?, Tensor::stack(&hists, 0)?))
    }
}
