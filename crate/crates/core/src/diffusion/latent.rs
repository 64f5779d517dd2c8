//! Boundary between images and the space the denoiser runs in.

use candle_core::Tensor;

use crate::error::Result;

/// Maps `(b, 3, H, W)` images in `[-1, 1]` to denoiser inputs and back. A
/// pretrained autoencoder would plug in here; the shipped model diffuses in
/// pixel space through [`PixelSpace`].
pub trait LatentCodec {
    fn encode(&self, images: &Tensor) -> Result<Tensor>;
    fn decode(&self, latents: &Tensor) -> Result<Tensor>;
    /// Spatial downsampling factor between image and latent.
    fn scale(&self) -> usize;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PixelSpace;

impl LatentCodec for PixelSpace {
    fn encode(&self, images: &Tensor) -> Result<Tensor> {
        Ok(images.clone())
    }

    fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        Ok(latents.clone())
    }

    fn scale(&self) -> usize {
        1
    }
}
