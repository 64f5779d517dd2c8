//! UNet denoiser shared by the backbone, the reference network and the
//! control branch.
//!
//! Images enter through a space-to-depth stem (`patch` x `patch` pixel blocks
//! become channels) and leave through the inverse rearrangement, so the
//! network's token grid is `H/patch x W/patch` at the finest level.
//!
//! Self-attention is delegated to a caller-supplied [`SelfAttentionHook`];
//! that is where reference tokens are injected or recorded.

use candle_core::{DType, Device, Tensor};

use crate::diffusion::attention::Attention;
use crate::diffusion::layers::{upsample2x, Conv2d, GroupNorm, LayerNorm, Linear, ResBlock, TimeEmbedding};
use crate::diffusion::model::ModelConfig;
use crate::diffusion::params::ParamBuilder;
use crate::error::{Error, Result};

/// Called once per self-attention layer, in execution order, with the
/// normalized tokens `(B, h*w, C)` and the layer's token grid `(h, w)`.
pub trait SelfAttentionHook {
    fn attend(&mut self, layer: usize, attn: &Attention, tokens: &Tensor, grid: (usize, usize)) -> Result<Tensor>;
}

/// Plain self-attention at every layer.
pub struct PlainAttention;

impl SelfAttentionHook for PlainAttention {
    fn attend(&mut self, _: usize, attn: &Attention, tokens: &Tensor, _: (usize, usize)) -> Result<Tensor> {
        crate::diffusion::attention::self_attention(attn, tokens)
    }
}

pub fn space_to_depth(x: &Tensor, p: usize) -> Result<Tensor> {
    if p == 1 {
        return Ok(x.clone());
    }
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h / p, p, w / p, p))?
        .permute([0, 1, 3, 5, 2, 4])?
        .reshape((b, c * p * p, h / p, w / p))?)
}

pub fn depth_to_space(x: &Tensor, p: usize) -> Result<Tensor> {
    if p == 1 {
        return Ok(x.clone());
    }
    let (b, cpp, h, w) = x.dims4()?;
    let c = cpp / (p * p);
    Ok(x.reshape((b, c, p, p, h, w))?
        .permute([0, 1, 4, 2, 5, 3])?
        .reshape((b, c, h * p, w * p))?)
}

#[derive(Debug, Clone)]
pub struct TransformerBlock {
    norm: GroupNorm,
    proj_in: Linear,
    ln1: LayerNorm,
    attn1: Attention,
    ln2: LayerNorm,
    attn2: Attention,
    ln3: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    proj_out: Linear,
}

impl TransformerBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, c: usize, cfg: &ModelConfig) -> Result<Self> {
        let n = |s: &str| format!("{name}.{s}");
        Ok(Self {
            norm: GroupNorm::new(pb, &n("norm"), c, cfg.groups)?,
            proj_in: Linear::new(pb, &n("proj_in"), c, c, true)?,
            ln1: LayerNorm::new(pb, &n("ln1"), c)?,
            attn1: Attention::new(pb, &n("attn1"), c, c, cfg.heads)?,
            ln2: LayerNorm::new(pb, &n("ln2"), c)?,
            attn2: Attention::new(pb, &n("attn2"), c, cfg.context_dim, cfg.heads)?,
            ln3: LayerNorm::new(pb, &n("ln3"), c)?,
            ff1: Linear::new(pb, &n("ff1"), c, 4 * c, true)?,
            ff2: Linear::new(pb, &n("ff2"), 4 * c, c, true)?,
            proj_out: Linear::new(pb, &n("proj_out"), c, c, true)?,
        })
    }

    pub fn forward(
        &self,
        x: &Tensor,
        context: &Tensor,
        layer: usize,
        hook: &mut dyn SelfAttentionHook,
    ) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let t = self.norm.forward(x)?.reshape((b, c, h * w))?.transpose(1, 2)?;
        let t = self.proj_in.forward(&t)?;
        let t = (&t + hook.attend(layer, &self.attn1, &self.ln1.forward(&t)?, (h, w))?)?;
        let ctx = if context.dim(0)? == b {
            context.clone()
        } else {
            let (_, m, d) = context.dims3()?;
            context.broadcast_as((b, m, d))?.contiguous()?
        };
        let t = (&t + self.attn2.forward_kv(&self.ln2.forward(&t)?, &ctx)?)?;
        let t = (&t + self.ff2.forward(&self.ff1.forward(&self.ln3.forward(&t)?)?.gelu_erf()?)?)?;
        let t = self.proj_out.forward(&t)?;
        Ok((x + t.transpose(1, 2)?.reshape((b, c, h, w))?)?)
    }
}

#[derive(Debug, Clone)]
struct DownLevel {
    res: ResBlock,
    attn: Option<TransformerBlock>,
    downsample: Option<Conv2d>,
}

#[derive(Debug, Clone)]
struct MidBlock {
    res1: ResBlock,
    attn: TransformerBlock,
    res2: ResBlock,
}

#[derive(Debug, Clone)]
struct UpLevel {
    level: usize,
    res: ResBlock,
    attn: Option<TransformerBlock>,
    upsample: Option<Conv2d>,
}

/// Which parts of the network to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UNetParts {
    /// Encoder, middle block, decoder and output head.
    Full,
    /// Encoder, middle block and the decoder up to its last attention level;
    /// no output head.
    ThroughLastAttention,
    /// Encoder and middle block only.
    EncoderOnly,
}

/// Encoder outputs: one skip tensor per level (finest first) and the middle
/// block output.
pub struct EncoderOutput {
    pub skips: Vec<Tensor>,
    pub mid: Tensor,
    pub emb: Tensor,
}

#[derive(Debug, Clone)]
pub struct UNet {
    cfg: ModelConfig,
    time: TimeEmbedding,
    conv_in: Conv2d,
    down: Vec<DownLevel>,
    mid: MidBlock,
    up: Vec<UpLevel>,
    out: Option<(GroupNorm, Conv2d)>,
}

impl UNet {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, cfg: &ModelConfig, parts: UNetParts) -> Result<Self> {
        cfg.validate()?;
        let n = |s: String| format!("{prefix}.{s}");
        let ch = &cfg.channels;
        let levels = ch.len();
        let emb_dim = cfg.time_embed_dim();
        let g = cfg.groups;
        let time = TimeEmbedding::new(pb, &n("time".into()), ch[0], emb_dim)?;
        let conv_in = Conv2d::same(pb, &n("conv_in".into()), cfg.latent_channels(), ch[0])?;

        let mut down = Vec::with_capacity(levels);
        let mut prev = ch[0];
        for (l, &c) in ch.iter().enumerate() {
            let res = ResBlock::new(pb, &n(format!("down.{l}.res")), prev, c, emb_dim, g)?;
            let attn = if l >= cfg.attention_from {
                Some(TransformerBlock::new(pb, &n(format!("down.{l}.attn")), c, cfg)?)
            } else {
                None
            };
            let downsample = if l + 1 < levels {
                Some(Conv2d::new(pb, &n(format!("down.{l}.downsample")), c, c, 3, 2, 1, false)?)
            } else {
                None
            };
            down.push(DownLevel { res, attn, downsample });
            prev = c;
        }

        let cl = ch[levels - 1];
        let mid = MidBlock {
            res1: ResBlock::new(pb, &n("mid.res1".into()), cl, cl, emb_dim, g)?,
            attn: TransformerBlock::new(pb, &n("mid.attn".into()), cl, cfg)?,
            res2: ResBlock::new(pb, &n("mid.res2".into()), cl, cl, emb_dim, g)?,
        };

        let last_up = match parts {
            UNetParts::Full => Some(0),
            UNetParts::ThroughLastAttention => Some(cfg.attention_from),
            UNetParts::EncoderOnly => None,
        };
        let mut up = Vec::new();
        if let Some(stop) = last_up {
            for l in (stop..levels).rev() {
                let c_in = cfg.decoder_input_channels(l);
                let res = ResBlock::new(pb, &n(format!("up.{l}.res")), c_in + ch[l], ch[l], emb_dim, g)?;
                let attn = if l >= cfg.attention_from {
                    Some(TransformerBlock::new(pb, &n(format!("up.{l}.attn")), ch[l], cfg)?)
                } else {
                    None
                };
                let upsample = if l > stop {
                    Some(Conv2d::same(pb, &n(format!("up.{l}.upsample")), ch[l], ch[l])?)
                } else {
                    None
                };
                up.push(UpLevel { level: l, res, attn, upsample });
            }
        }

        let out = if parts == UNetParts::Full {
            Some((
                GroupNorm::new(pb, &n("out.norm".into()), ch[0], g)?,
                Conv2d::same(pb, &n("out.conv".into()), ch[0], cfg.latent_channels())?,
            ))
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            time,
            conv_in,
            down,
            mid,
            up,
            out,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn time_embedding(&self, timesteps: &[f64], dtype: DType, device: &Device) -> Result<Tensor> {
        self.time.forward(timesteps, dtype, device)
    }

    fn check_input(&self, x: &Tensor, what: &str) -> Result<()> {
        let dims = x.dims();
        let want = [3, self.cfg.height, self.cfg.width];
        if dims.len() != 4 || dims[1..] != want {
            return Err(Error::shape(
                what,
                format!("expected (B, 3, {}, {}), got {dims:?}", self.cfg.height, self.cfg.width),
            ));
        }
        Ok(())
    }

    /// `(B, C, h, w)` latent after the stem and input convolution.
    pub fn stem(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x, "input")?;
        self.conv_in.forward(&space_to_depth(x, self.cfg.patch)?)
    }

    /// Runs the encoder and middle block. `extra` is added to the latent
    /// right after the input convolution.
    pub fn encode(
        &self,
        x: &Tensor,
        timesteps: &[f64],
        extra: Option<&Tensor>,
        context: &Tensor,
        hook: &mut dyn SelfAttentionHook,
    ) -> Result<EncoderOutput> {
        if x.dim(0)? != timesteps.len() {
            return Err(Error::shape(
                "timesteps",
                format!("{} timesteps for batch {}", timesteps.len(), x.dim(0)?),
            ));
        }
        let emb = self.time_embedding(timesteps, x.dtype(), x.device())?;
        let mut h = self.stem(x)?;
        if let Some(e) = extra {
            h = (h + e)?;
        }
        let mut layer = 0;
        let mut skips = Vec::with_capacity(self.down.len());
        for lvl in &self.down {
            h = lvl.res.forward(&h, &emb)?;
            if let Some(a) = &lvl.attn {
                h = a.forward(&h, context, layer, hook)?;
                layer += 1;
            }
            skips.push(h.clone());
            if let Some(d) = &lvl.downsample {
                h = d.forward(&h)?;
            }
        }
        let h = self.mid.res1.forward(&h, &emb)?;
        let h = self.mid.attn.forward(&h, context, layer, hook)?;
        let mid = self.mid.res2.forward(&h, &emb)?;
        Ok(EncoderOutput { skips, mid, emb })
    }

    /// Number of self-attention layers the encoder and middle block run.
    pub fn encoder_attention_layers(&self) -> usize {
        self.down.iter().filter(|l| l.attn.is_some()).count() + 1
    }

    /// Runs the decoder. `residuals`, when given, holds one tensor per
    /// decoder block (execution order), each added to that block's input.
    pub fn decode(
        &self,
        enc: EncoderOutput,
        residuals: Option<&[Tensor]>,
        context: &Tensor,
        hook: &mut dyn SelfAttentionHook,
    ) -> Result<Tensor> {
        if let Some(r) = residuals {
            if r.len() != self.up.len() {
                return Err(Error::shape(
                    "control residuals",
                    format!("{} residuals for {} decoder blocks", r.len(), self.up.len()),
                ));
            }
        }
        let mut layer = self.encoder_attention_layers();
        let mut h = enc.mid;
        for (i, lvl) in self.up.iter().enumerate() {
            if let Some(r) = residuals {
                if r[i].dims() != h.dims() {
                    return Err(Error::shape(
                        format!("decoder block {i}"),
                        format!("residual {:?} vs block input {:?}", r[i].dims(), h.dims()),
                    ));
                }
                h = (h + &r[i])?;
            }
            h = Tensor::cat(&[&h, &enc.skips[lvl.level]], 1)?;
            h = lvl.res.forward(&h, &enc.emb)?;
            if let Some(a) = &lvl.attn {
                h = a.forward(&h, context, layer, hook)?;
                layer += 1;
            }
            if let Some(u) = &lvl.upsample {
                h = u.forward(&upsample2x(&h)?)?;
            }
        }
        match &self.out {
            Some((norm, conv)) => depth_to_space(&conv.forward(&norm.forward(&h)?.silu()?)?, self.cfg.patch),
            None => Ok(h),
        }
    }

    pub fn forward(
        &self,
        x: &Tensor,
        timesteps: &[f64],
        residuals: Option<&[Tensor]>,
        context: &Tensor,
        hook: &mut dyn SelfAttentionHook,
    ) -> Result<Tensor> {
        let enc = self.encode(x, timesteps, None, context, hook)?;
        self.decode(enc, residuals, context, hook)
    }

    /// Input shapes `(C, h, w)` of each decoder block in execution order.
    pub fn decoder_block_shapes(&self) -> Vec<(usize, usize, usize)> {
        self.up
            .iter()
            .map(|u| {
                let (h, w) = self.cfg.grid(u.level);
                (self.cfg.decoder_input_channels(u.level), h, w)
            })
            .collect()
    }
}
