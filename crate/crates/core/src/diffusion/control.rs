//! Pose control branch: a copy of the backbone encoder driven by the
//! skeleton map, emitting one residual per backbone decoder block through
//! zero-initialized projections.

use candle_core::Tensor;

use crate::diffusion::layers::Conv2d;
use crate::diffusion::model::ModelConfig;
use crate::diffusion::params::ParamBuilder;
use crate::diffusion::unet::{space_to_depth, PlainAttention, UNet, UNetParts};
use crate::error::{Error, Result};

const HINT_CHANNELS: usize = 16;

/// Residuals in backbone decoder execution order (deepest block first).
#[derive(Debug, Clone)]
pub struct ControlResiduals {
    pub blocks: Vec<Tensor>,
}

impl ControlResiduals {
    pub fn zeros(cfg: &ModelConfig, batch: usize, dtype: candle_core::DType, device: &candle_core::Device) -> Result<Self> {
        let blocks = cfg
            .decoder_block_shapes()
            .into_iter()
            .map(|(c, h, w)| Ok(Tensor::zeros((batch, c, h, w), dtype, device)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }

    pub fn detach(&self) -> Self {
        Self {
            blocks: self.blocks.iter().map(|t| t.detach()).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ControlNet {
    trunk: UNet,
    hint: [Conv2d; 3],
    /// Zero projections, one per backbone decoder block.
    zero: Vec<Conv2d>,
    patch: usize,
}

impl ControlNet {
    pub fn new(pb: &mut ParamBuilder, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let trunk = UNet::new(pb, prefix, cfg, UNetParts::EncoderOnly)?;
        let c0 = cfg.channels[0];
        let lc = cfg.latent_channels();
        let hint = [
            Conv2d::same(pb, &format!("{prefix}.hint.0"), lc, HINT_CHANNELS)?,
            Conv2d::same(pb, &format!("{prefix}.hint.1"), HINT_CHANNELS, HINT_CHANNELS)?,
            Conv2d::new(pb, &format!("{prefix}.hint.2"), HINT_CHANNELS, c0, 3, 1, 1, true)?,
        ];
        let levels = cfg.channels.len();
        // decoder block i runs at level L-1-i; its residual comes from the
        // middle block (deepest) or the encoder skip at the same level
        let mut zero = Vec::with_capacity(levels);
        for (i, (c_out, _, _)) in cfg.decoder_block_shapes().into_iter().enumerate() {
            let level = levels - 1 - i;
            let c_in = if level == levels - 1 { cfg.channels[levels - 1] } else { cfg.channels[level] };
            zero.push(Conv2d::pointwise(pb, &format!("{prefix}.zero.{i}"), c_in, c_out, true)?);
        }
        Ok(Self {
            trunk,
            hint,
            zero,
            patch: cfg.patch,
        })
    }

    fn encode_hint(&self, skel: &Tensor) -> Result<Tensor> {
        let h = space_to_depth(skel, self.patch)?;
        let h = self.hint[0].forward(&h)?.silu()?;
        let h = self.hint[1].forward(&h)?.silu()?;
        self.hint[2].forward(&h)
    }

    /// `skel` and `x_t` are `(B, 3, H, W)`.
    pub fn forward(&self, skel: &Tensor, x_t: &Tensor, timesteps: &[f64], context: &Tensor) -> Result<ControlResiduals> {
        if skel.dims() != x_t.dims() {
            return Err(Error::shape(
                "skeleton map",
                format!("skeleton {:?} vs noisy input {:?}", skel.dims(), x_t.dims()),
            ));
        }
        let hint = self.encode_hint(skel)?;
        let enc = self.trunk.encode(x_t, timesteps, Some(&hint), context, &mut PlainAttention)?;
        let levels = enc.skips.len();
        let mut blocks = Vec::with_capacity(self.zero.len());
        for (i, z) in self.zero.iter().enumerate() {
            let level = levels - 1 - i;
            let src = if level == levels - 1 { &enc.mid } else { &enc.skips[level] };
            blocks.push(z.forward(src)?);
        }
        Ok(ControlResiduals { blocks })
    }
}
