use std::collections::HashMap;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::attention::{all_frames_attention, concat_reference_attention, Attention};
use crate::diffusion::control::{ControlNet, ControlResiduals};
use crate::diffusion::params::{Init, ParamBuilder, ParamStore};
use crate::diffusion::reference::{FeatureBank, ReferenceNet};
use crate::diffusion::unet::{PlainAttention, SelfAttentionHook, UNet, UNetParts};
use crate::error::{Error, Result};
use crate::imaging::Mask;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Side of the pixel block folded into channels by the input stem.
    pub patch: usize,
    /// Channel width per resolution level, finest first.
    pub channels: Vec<usize>,
    /// First level (0 = finest) that carries transformer blocks. The middle
    /// block always has one.
    pub attention_from: usize,
    pub heads: usize,
    pub groups: usize,
    pub context_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            patch: 4,
            channels: vec![48, 64, 64],
            attention_from: 0,
            heads: 2,
            groups: 8,
            context_dim: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let levels = self.channels.len();
        if levels == 0 {
            return Err(Error::Config("at least one channel level is required".into()));
        }
        if self.patch == 0 || self.heads == 0 || self.groups == 0 || self.context_dim == 0 {
            return Err(Error::Config("patch, heads, groups and context_dim must be positive".into()));
        }
        let div = self.patch << (levels - 1);
        if self.height == 0 || self.width == 0 || self.height % div != 0 || self.width % div != 0 {
            return Err(Error::Config(format!(
                "image size {}x{} must be a positive multiple of {div}",
                self.width, self.height
            )));
        }
        for &c in &self.channels {
            if c == 0 || c % self.groups != 0 || c % self.heads != 0 {
                return Err(Error::Config(format!(
                    "channel width {c} must be divisible by groups ({}) and heads ({})",
                    self.groups, self.heads
                )));
            }
        }
        if self.attention_from >= levels {
            return Err(Error::Config(format!(
                "attention_from {} exceeds the {levels} levels",
                self.attention_from
            )));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn latent_channels(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn time_embed_dim(&self) -> usize {
        4 * self.channels[0]
    }

    /// Token grid `(rows, cols)` at `level`.
    pub fn grid(&self, level: usize) -> (usize, usize) {
        let d = self.patch << level;
        (self.height / d, self.width / d)
    }

    pub fn decoder_input_channels(&self, level: usize) -> usize {
        let last = self.levels() - 1;
        self.channels[if level == last { last } else { level + 1 }]
    }

    /// `(channels, grid)` of every self-attention layer in execution order:
    /// encoder levels, middle block, decoder levels.
    pub fn attention_layers(&self) -> Vec<(usize, (usize, usize))> {
        let levels = self.levels();
        let attn: Vec<usize> = (self.attention_from..levels).collect();
        let mut out: Vec<_> = attn.iter().map(|&l| (self.channels[l], self.grid(l))).collect();
        out.push((self.channels[levels - 1], self.grid(levels - 1)));
        out.extend(attn.iter().rev().map(|&l| (self.channels[l], self.grid(l))));
        out
    }

    pub fn tokens_per_layer(&self) -> Vec<usize> {
        self.attention_layers().iter().map(|(_, (h, w))| h * w).collect()
    }

    /// `(C, h, w)` input of each backbone decoder block, deepest first.
    pub fn decoder_block_shapes(&self) -> Vec<(usize, usize, usize)> {
        (0..self.levels())
            .rev()
            .map(|l| {
                let (h, w) = self.grid(l);
                (self.decoder_input_channels(l), h, w)
            })
            .collect()
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// How the backbone's self-attention spans the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionMode {
    /// Each batch entry attends over its own tokens plus the reference.
    PerFrame,
    /// The batch is one temporal window; all of its tokens attend jointly.
    AllFrames,
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all-frames" => Ok(Self::AllFrames),
            "per-frame" => Ok(Self::PerFrame),
            other => Err(Error::invalid(format!(
                "unknown temporal mode `{other}` (expected all-frames or per-frame)"
            ))),
        }
    }
}

struct BankAttention<'a> {
    bank: &'a FeatureBank,
    mode: AttentionMode,
}

impl SelfAttentionHook for BankAttention<'_> {
    fn attend(&mut self, layer: usize, attn: &Attention, tokens: &Tensor, _: (usize, usize)) -> Result<Tensor> {
        let reference = &self.bank.layers[layer].tokens;
        let out = match self.mode {
            AttentionMode::PerFrame => concat_reference_attention(attn, tokens, reference),
            AttentionMode::AllFrames => all_frames_attention(attn, tokens, reference),
        };
        out.map_err(|e| match e {
            Error::Shape { detail, .. } => Error::shape(format!("self-attention layer {layer}"), detail),
            other => other,
        })
    }
}

/// Backbone denoiser, reference network, pose control branch and the null
/// text context, sharing one parameter store.
#[derive(Debug, Clone)]
pub struct GestureVideoModel {
    cfg: ModelConfig,
    params: ParamStore,
    backbone: UNet,
    reference: ReferenceNet,
    control: ControlNet,
    null_ctx: Tensor,
}

impl GestureVideoModel {
    /// Fresh model. The reference network and the control trunk start as
    /// copies of the backbone; only the reference network is trainable.
    pub fn new(cfg: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        Self::assemble(cfg, ParamBuilder::new(seed, dtype, device))
    }

    pub fn from_tensors(cfg: &ModelConfig, tensors: HashMap<String, Tensor>, dtype: DType, device: &Device) -> Result<Self> {
        Self::assemble(cfg, ParamBuilder::from_checkpoint(tensors, dtype, device))
    }

    fn assemble(cfg: &ModelConfig, mut pb: ParamBuilder) -> Result<Self> {
        cfg.validate()?;
        pb.set_trainable(false);
        let backbone = UNet::new(&mut pb, "backbone", cfg, UNetParts::Full)?;

        pb.set_trainable(true);
        pb.alias("reference.", "backbone.");
        let reference = ReferenceNet::new(&mut pb, "reference", cfg)?;
        pb.clear_aliases();

        pb.set_trainable(false);
        pb.alias("control.", "backbone.");
        let control = ControlNet::new(&mut pb, "control", cfg)?;
        pb.clear_aliases();

        let null_ctx = pb.tensor("null_ctx", &[1, 1, cfg.context_dim], Init::Zeros)?;
        let params = pb.finish()?;
        Ok(Self {
            cfg: cfg.clone(),
            params,
            backbone,
            reference,
            control,
            null_ctx,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn null_context(&self) -> &Tensor {
        &self.null_ctx
    }

    pub fn dtype(&self) -> DType {
        self.null_ctx.dtype()
    }

    pub fn device(&self) -> &Device {
        self.null_ctx.device()
    }

    pub fn reference_net(&self) -> &ReferenceNet {
        &self.reference
    }

    pub fn backbone(&self) -> &UNet {
        &self.backbone
    }

    /// Gains `gamma` of every reference self-attention layer.
    pub fn gammas(&self) -> Result<Vec<f64>> {
        self.reference.magnification().gammas()
    }

    /// `image` is `(1, 3, H, W)` in `[-1, 1]`.
    pub fn reference_forward(&self, image: &Tensor, mask: &Mask) -> Result<FeatureBank> {
        self.reference.forward(image, mask, &self.null_ctx)
    }

    pub fn controlnet_forward(&self, skel: &Tensor, x_t: &Tensor, timesteps: &[f64]) -> Result<ControlResiduals> {
        self.control.forward(skel, x_t, timesteps, &self.null_ctx)
    }

    pub fn backbone_forward(
        &self,
        x_t: &Tensor,
        timesteps: &[f64],
        bank: &FeatureBank,
        ctrl: &ControlResiduals,
        mode: AttentionMode,
    ) -> Result<Tensor> {
        let layers = self.cfg.attention_layers();
        if bank.layers.len() != layers.len() {
            return Err(Error::shape(
                "feature bank",
                format!("{} layers, backbone has {}", bank.layers.len(), layers.len()),
            ));
        }
        let b = x_t.dim(0)?;
        for (i, (bl, (c, _))) in bank.layers.iter().zip(&layers).enumerate() {
            let dims = bl.tokens.dims();
            if dims.len() != 3 || !(dims[0] == 1 || dims[0] == b) || dims[2] != *c {
                return Err(Error::shape(
                    format!("self-attention layer {i}"),
                    format!("bank tokens {dims:?}, expected (1 or {b}, m, {c})"),
                ));
            }
        }
        let mut hook = BankAttention { bank, mode };
        self.backbone
            .forward(x_t, timesteps, Some(&ctrl.blocks), &self.null_ctx, &mut hook)
    }

    /// The backbone with plain self-attention and no control input.
    pub fn bare_forward(&self, x_t: &Tensor, timesteps: &[f64]) -> Result<Tensor> {
        self.backbone
            .forward(x_t, timesteps, None, &self.null_ctx, &mut PlainAttention)
    }
}
