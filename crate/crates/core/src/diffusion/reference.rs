//! Reference network: encodes the reference image once and records the
//! output of every self-attention layer, with face tokens magnified.

use candle_core::{DType, Device, Tensor};

use crate::diffusion::attention::{face_enhance_attention, Attention};
use crate::diffusion::model::ModelConfig;
use crate::diffusion::params::{Init, ParamBuilder};
use crate::diffusion::unet::{SelfAttentionHook, UNet, UNetParts};
use crate::error::{Error, Result};
use crate::imaging::Mask;

/// Initial raw magnification; `gamma(-4) ~= 1.018`.
pub const THETA_INIT: f64 = -4.0;

/// `1 + softplus(theta)`, evaluated as `1 + relu(t) + ln(1 + exp(-|t|))` so
/// large inputs do not overflow.
pub fn gamma_of(theta: &Tensor) -> Result<Tensor> {
    let soft = (theta.relu()? + theta.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?)?;
    Ok(soft.affine(1.0, 1.0)?)
}

pub fn gamma_scalar(theta: f64) -> f64 {
    1.0 + theta.max(0.0) + (-theta.abs()).exp().ln_1p()
}

/// One learnable raw gain per self-attention layer.
#[derive(Debug, Clone)]
pub struct MagnificationParam {
    theta: Tensor,
}

impl MagnificationParam {
    pub fn new(pb: &mut ParamBuilder, name: &str, layers: usize) -> Result<Self> {
        Ok(Self {
            theta: pb.tensor(name, &[layers], Init::Constant(THETA_INIT))?,
        })
    }

    pub fn theta(&self) -> &Tensor {
        &self.theta
    }

    /// Scalar gain tensor for `layer`, differentiable in theta.
    pub fn gamma(&self, layer: usize) -> Result<Tensor> {
        gamma_of(&self.theta.get(layer)?)
    }

    pub fn gammas(&self) -> Result<Vec<f64>> {
        Ok(gamma_of(&self.theta)?.to_dtype(DType::F64)?.to_vec1()?)
    }
}

/// Tokens and face flags recorded at one self-attention layer.
#[derive(Debug, Clone)]
pub struct BankLayer {
    /// `(1, m, C)`.
    pub tokens: Tensor,
    pub flags: Vec<bool>,
    pub grid: (usize, usize),
}

/// Per-layer reference tokens consumed by the backbone.
#[derive(Debug, Clone)]
pub struct FeatureBank {
    pub layers: Vec<BankLayer>,
}

impl FeatureBank {
    /// A bank with zero tokens at every layer.
    pub fn empty(cfg: &ModelConfig, dtype: DType, device: &Device) -> Result<Self> {
        let layers = cfg
            .attention_layers()
            .into_iter()
            .map(|(c, _)| {
                Ok(BankLayer {
                    tokens: Tensor::zeros((1, 0, c), dtype, device)?,
                    flags: Vec::new(),
                    grid: (0, 0),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn detach(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| BankLayer {
                    tokens: l.tokens.detach(),
                    flags: l.flags.clone(),
                    grid: l.grid,
                })
                .collect(),
        }
    }
}

struct Recorder<'a> {
    mask: &'a Mask,
    gain: &'a MagnificationParam,
    layers: Vec<BankLayer>,
}

impl SelfAttentionHook for Recorder<'_> {
    fn attend(&mut self, layer: usize, attn: &Attention, tokens: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
        let flags = self.mask.downsample_coverage(grid.0, grid.1)?;
        let out = face_enhance_attention(attn, tokens, &flags, &self.gain.gamma(layer)?)?;
        self.layers.push(BankLayer {
            tokens: out.clone(),
            flags,
            grid,
        });
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct ReferenceNet {
    unet: UNet,
    gain: MagnificationParam,
}

impl ReferenceNet {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let unet = UNet::new(pb, prefix, cfg, UNetParts::ThroughLastAttention)?;
        let gain = MagnificationParam::new(pb, &format!("{prefix}.theta"), cfg.attention_layers().len())?;
        Ok(Self { unet, gain })
    }

    pub fn magnification(&self) -> &MagnificationParam {
        &self.gain
    }

    /// Encodes `(1, 3, H, W)` at timestep 0 with the given face mask.
    pub fn forward(&self, image: &Tensor, mask: &Mask, context: &Tensor) -> Result<FeatureBank> {
        let cfg = self.unet.config();
        if mask.height() as usize != cfg.height || mask.width() as usize != cfg.width {
            return Err(Error::shape(
                "face mask",
                format!(
                    "mask is {}x{}, image is {}x{}",
                    mask.width(),
                    mask.height(),
                    cfg.width,
                    cfg.height
                ),
            ));
        }
        if image.dim(0)? != 1 {
            return Err(Error::shape("reference image", "expected a single image"));
        }
        let mut rec = Recorder {
            mask,
            gain: &self.gain,
            layers: Vec::new(),
        };
        let enc = self.unet.encode(image, &[0.0], None, context, &mut rec)?;
        self.unet.decode(enc, None, context, &mut rec)?;
        Ok(FeatureBank { layers: rec.layers })
    }
}
