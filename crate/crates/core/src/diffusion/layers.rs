use candle_core::{DType, Tensor, D};

use crate::diffusion::params::{Init, ParamBuilder};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let weight = pb.tensor(&format!("{name}.weight"), &[d_out, d_in], Init::fan_in(d_in))?;
        let bias = if bias {
            Some(pb.tensor(&format!("{name}.bias"), &[d_out], Init::fan_in(d_in))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn from_parts(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        // flatten leading axes so the weight is never broadcast
        let dims = x.dims().to_vec();
        let d_in = *dims.last().expect("linear input has at least one axis");
        let rows = x.elem_count() / d_in.max(1);
        let mut out_dims = dims.clone();
        *out_dims.last_mut().expect("nonempty") = self.weight.dim(0)?;
        let y = x.reshape((rows, d_in))?.matmul(&self.weight.t()?)?.reshape(out_dims)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        zero: bool,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let (w_init, b_init) = if zero {
            (Init::Zeros, Init::Zeros)
        } else {
            (Init::fan_in(fan_in), Init::fan_in(fan_in))
        };
        let weight = pb.tensor(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], w_init)?;
        let bias = pb.tensor(&format!("{name}.bias"), &[c_out], b_init)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn same(pb: &mut ParamBuilder, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Self::new(pb, name, c_in, c_out, 3, 1, 1, false)
    }

    pub fn pointwise(pb: &mut ParamBuilder, name: &str, c_in: usize, c_out: usize, zero: bool) -> Result<Self> {
        Self::new(pb, name, c_in, c_out, 1, 1, 0, zero)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Convolution as an explicit unfold plus matmul. Candle's native conv
    /// backward always differentiates the kernel too, which dominates step
    /// time when most kernels are frozen.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (c_out, c_in, k, _) = self.weight.dims4()?;
        let (b, c, h, w) = x.dims4()?;
        if c != c_in {
            return Err(Error::shape("conv2d", format!("expected {c_in} input channels, got {c}")));
        }
        let (p, s) = (self.padding, self.stride);
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (w + 2 * p - k) / s + 1;
        let cols = if k == 1 && s == 1 && p == 0 {
            x.reshape((b, c, h * w))?
        } else {
            let xp = if p > 0 {
                x.pad_with_zeros(2, p, p)?.pad_with_zeros(3, p, p)?
            } else {
                x.clone()
            };
            let mut taps = Vec::with_capacity(k * k);
            for ky in 0..k {
                for kx in 0..k {
                    let v = xp.narrow(2, ky, s * (ho - 1) + 1)?.narrow(3, kx, s * (wo - 1) + 1)?;
                    let v = if s == 1 {
                        v
                    } else {
                        v.pad_with_zeros(2, 0, s - 1)?
                            .pad_with_zeros(3, 0, s - 1)?
                            .reshape((b, c, ho, s, wo, s))?
                            .narrow(3, 0, 1)?
                            .narrow(5, 0, 1)?
                    };
                    taps.push(v.reshape((b, c, 1, ho * wo))?);
                }
            }
            Tensor::cat(&taps, 2)?.reshape((b, c * k * k, ho * wo))?
        };
        let wm = self.weight.reshape((c_out, c_in * k * k))?;
        let y = wm.broadcast_matmul(&cols)?.reshape((b, c_out, ho, wo))?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c_out, 1, 1))?)?)
    }
}

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GroupNorm {
    groups: usize,
    weight: Tensor,
    bias: Tensor,
}

impl GroupNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            groups,
            weight: pb.tensor(&format!("{name}.weight"), &[channels], Init::Ones)?,
            bias: pb.tensor(&format!("{name}.bias"), &[channels], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let g = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
        let normed = normed.reshape((b, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.tensor(&format!("{name}.weight"), &[dim], Init::Ones)?,
            bias: pb.tensor(&format!("{name}.bias"), &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

/// Nearest-neighbour 2x upsampling built from a broadcast, so the backward
/// pass is an ordinary sum reduction.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))?)
}

/// Sinusoidal embedding of integer timesteps, `(B, dim)`.
pub fn timestep_embedding(timesteps: &[f64], dim: usize, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(timesteps.len() * dim);
    for &t in timesteps {
        let freqs: Vec<f64> = (0..half)
            .map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp() * t)
            .collect();
        data.extend(freqs.iter().map(|a| a.cos()));
        data.extend(freqs.iter().map(|a| a.sin()));
        if dim % 2 == 1 {
            data.push(0.0);
        }
    }
    Ok(Tensor::from_vec(data, (timesteps.len(), dim), device)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    base_dim: usize,
    fc1: Linear,
    fc2: Linear,
}

impl TimeEmbedding {
    pub fn new(pb: &mut ParamBuilder, name: &str, base_dim: usize, emb_dim: usize) -> Result<Self> {
        Ok(Self {
            base_dim,
            fc1: Linear::new(pb, &format!("{name}.fc1"), base_dim, emb_dim, true)?,
            fc2: Linear::new(pb, &format!("{name}.fc2"), emb_dim, emb_dim, true)?,
        })
    }

    pub fn forward(&self, timesteps: &[f64], dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
        let e = timestep_embedding(timesteps, self.base_dim, dtype, device)?;
        self.fc2.forward(&silu(&self.fc1.forward(&e)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        c_in: usize,
        c_out: usize,
        emb_dim: usize,
        groups: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(pb, &format!("{name}.norm1"), c_in, groups)?,
            conv1: Conv2d::same(pb, &format!("{name}.conv1"), c_in, c_out)?,
            time_proj: Linear::new(pb, &format!("{name}.time_proj"), emb_dim, c_out, true)?,
            norm2: GroupNorm::new(pb, &format!("{name}.norm2"), c_out, groups)?,
            conv2: Conv2d::same(pb, &format!("{name}.conv2"), c_out, c_out)?,
            skip: if c_in != c_out {
                Some(Conv2d::pointwise(pb, &format!("{name}.skip"), c_in, c_out, false)?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, x: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&silu(&self.norm1.forward(x)?)?)?;
        let t = self.time_proj.forward(&silu(emb)?)?;
        let (b, c) = t.dims2()?;
        let h = h.broadcast_add(&t.reshape((b, c, 1, 1))?)?;
        let h = self.conv2.forward(&silu(&self.norm2.forward(&h)?)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}
