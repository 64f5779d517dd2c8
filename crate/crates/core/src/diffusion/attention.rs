//! Multi-head attention and the token-mixing variants used by the networks.
//!
//! Tokens are `(batch, tokens, channels)`.

use candle_core::{Tensor, D};

use crate::diffusion::layers::Linear;
use crate::diffusion::params::ParamBuilder;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Attention {
    heads: usize,
    to_q: Linear,
    to_k: Linear,
    to_v: Linear,
    to_out: Linear,
}

/// Row-wise softmax over the last axis. The subtracted maximum is detached:
/// it cancels analytically, so it must not contribute to the gradient.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

impl Attention {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, ctx_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(format!("{dim} channels cannot be split into {heads} heads")));
        }
        Ok(Self {
            heads,
            to_q: Linear::new(pb, &format!("{name}.to_q"), dim, dim, false)?,
            to_k: Linear::new(pb, &format!("{name}.to_k"), ctx_dim, dim, false)?,
            to_v: Linear::new(pb, &format!("{name}.to_v"), ctx_dim, dim, false)?,
            to_out: Linear::new(pb, &format!("{name}.to_out"), dim, dim, true)?,
        })
    }

    /// Builds an attention layer from explicit `(out, in)` weight matrices.
    pub fn from_weights(heads: usize, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor) -> Result<Self> {
        let dim = wq.dim(0)?;
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(format!("{dim} channels cannot be split into {heads} heads")));
        }
        Ok(Self {
            heads,
            to_q: Linear::from_parts(wq, None),
            to_k: Linear::from_parts(wk, None),
            to_v: Linear::from_parts(wv, None),
            to_out: Linear::from_parts(wo, None),
        })
    }

    /// Single-head attention whose four projections are the identity.
    pub fn identity(dim: usize, dtype: candle_core::DType, device: &candle_core::Device) -> Result<Self> {
        let eye = Tensor::eye(dim, dtype, device)?;
        Self::from_weights(1, eye.clone(), eye.clone(), eye.clone(), eye)
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        Ok(x.reshape((b, n, self.heads, c / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// Attention probabilities `(b, heads, n, m)` for queries from `x_q`
    /// and keys from `x_kv`.
    pub fn probabilities(&self, x_q: &Tensor, x_kv: &Tensor) -> Result<Tensor> {
        let q = self.split_heads(&self.to_q.forward(x_q)?)?;
        let k = self.split_heads(&self.to_k.forward(x_kv)?)?;
        let d = q.dim(D::Minus1)?;
        let logits = (q.matmul(&k.t()?.contiguous()?)? / (d as f64).sqrt())?;
        softmax_last(&logits)
    }

    /// Queries from `x_q`, keys and values from `x_kv`.
    pub fn forward_kv(&self, x_q: &Tensor, x_kv: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x_q.dims3()?;
        let (bk, _, _) = x_kv.dims3()?;
        if bk != b {
            return Err(Error::shape("attention", format!("query batch {b} vs key batch {bk}")));
        }
        let p = self.probabilities(x_q, x_kv)?;
        let v = self.split_heads(&self.to_v.forward(x_kv)?)?;
        let o = p.matmul(&v)?.transpose(1, 2)?.reshape((b, n, c))?;
        self.to_out.forward(&o)
    }
}

pub fn self_attention(attn: &Attention, tokens: &Tensor) -> Result<Tensor> {
    attn.forward_kv(tokens, tokens)
}

/// Per-token gain `1 + flag * (gamma - 1)` as `(1, n, 1)`; `gamma` is a scalar
/// tensor so gradients reach whatever produced it.
fn face_gain(flags: &[bool], gamma: &Tensor, like: &Tensor) -> Result<Tensor> {
    let n = flags.len();
    let mask: Vec<f64> = flags.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect();
    let mask = Tensor::from_vec(mask, (1, n, 1), like.device())?.to_dtype(like.dtype())?;
    let g = gamma.reshape((1, 1, 1))?.affine(1.0, -1.0)?;
    Ok(mask.broadcast_mul(&g)?.affine(1.0, 1.0)?)
}

/// Face tokens are multiplied by `gamma` before an ordinary self-attention.
pub fn face_enhance_attention(attn: &Attention, tokens: &Tensor, flags: &[bool], gamma: &Tensor) -> Result<Tensor> {
    let (_, n, _) = tokens.dims3()?;
    if flags.len() != n {
        return Err(Error::shape(
            "face_enhance_attention",
            format!("{} face flags for {n} tokens", flags.len()),
        ));
    }
    if gamma.elem_count() != 1 {
        return Err(Error::shape("face_enhance_attention", "gain must be a scalar"));
    }
    let scaled = tokens.broadcast_mul(&face_gain(flags, gamma, tokens)?)?;
    self_attention(attn, &scaled)
}

/// Broadcasts a batch-1 reference to `b` and checks its channel width.
fn match_reference(reference: &Tensor, b: usize, c: usize, layer: &str) -> Result<Tensor> {
    let (rb, m, rc) = reference.dims3()?;
    if rc != c {
        return Err(Error::shape(layer, format!("reference has {rc} channels, tokens have {c}")));
    }
    if rb == b {
        Ok(reference.clone())
    } else if rb == 1 {
        Ok(reference.broadcast_as((b, m, c))?.contiguous()?)
    } else {
        Err(Error::shape(layer, format!("reference batch {rb} vs token batch {b}")))
    }
}

/// Queries from `tokens`; keys and values from `[tokens ‖ reference]`.
pub fn concat_reference_attention(attn: &Attention, tokens: &Tensor, reference: &Tensor) -> Result<Tensor> {
    let (b, _, c) = tokens.dims3()?;
    let reference = match_reference(reference, b, c, "concat_reference_attention")?;
    if reference.dim(1)? == 0 {
        return self_attention(attn, tokens);
    }
    let kv = Tensor::cat(&[tokens, &reference], 1)?;
    attn.forward_kv(tokens, &kv)
}

/// All `f` frames of a window attend jointly: the `f * n` window tokens form
/// one sequence whose keys and values are extended by the `m` reference
/// tokens. `reference` is `(m, c)` or `(1, m, c)`.
pub fn all_frames_attention(attn: &Attention, window: &Tensor, reference: &Tensor) -> Result<Tensor> {
    let (f, n, c) = window.dims3()?;
    if f == 0 {
        return Err(Error::invalid("all-frames attention needs at least one frame"));
    }
    let reference = match reference.rank() {
        2 => reference.unsqueeze(0)?,
        _ => reference.clone(),
    };
    let flat = window.reshape((1, f * n, c))?;
    let out = concat_reference_attention(attn, &flat, &reference)
        .map_err(|e| match e {
            Error::Shape { detail, .. } => Error::shape("all_frames_attention", detail),
            other => other,
        })?;
    Ok(out.reshape((f, n, c))?)
}
