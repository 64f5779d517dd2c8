//! Deterministic video sampling over non-overlapping temporal windows.

use std::ops::Range;

use candle_core::{DType, Tensor};
use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{AttentionMode, ControlResiduals, FeatureBank, GestureVideoModel, NoiseSchedule};
use crate::error::{Error, Result};
use crate::imaging::{tensor_to_rgb, Mask};
use crate::training::normal_tensor;

/// Initial noise across windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    /// One array reused for every frame slot of every window.
    Shared,
    /// One array per slot, reused across windows.
    SlotShared,
    /// Fresh noise for every slot of every window.
    Independent,
}

impl std::str::FromStr for NoiseMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(Self::Shared),
            "slot-shared" => Ok(Self::SlotShared),
            "independent" => Ok(Self::Independent),
            other => Err(Error::invalid(format!(
                "unknown noise mode `{other}` (expected shared, slot-shared or independent)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub window: usize,
    pub seed: u64,
    pub temporal_mode: AttentionMode,
    pub noise_mode: NoiseMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            window: 4,
            seed: 0,
            temporal_mode: AttentionMode::AllFrames,
            noise_mode: NoiseMode::Shared,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Config("sampler steps must be at least 1".into()));
        }
        if self.window < 1 {
            return Err(Error::Config("window size must be at least 1".into()));
        }
        Ok(())
    }
}

/// One standard-normal array of `shape` from `seed`.
pub fn init_window_noise(shape: &[usize], seed: u64, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    normal_tensor(&mut rng, shape, dtype, device)
}

/// `(t, t_prev)` pairs of an evenly strided DDIM trajectory, ending at -1.
pub fn ddim_timesteps(num_train_steps: usize, steps: usize) -> Result<Vec<(i64, i64)>> {
    if steps < 1 || steps > num_train_steps {
        return Err(Error::invalid(format!(
            "{steps} sampling steps for a {num_train_steps}-step schedule"
        )));
    }
    let ratio = num_train_steps / steps;
    let ts: Vec<i64> = (0..steps).rev().map(|i| (i * ratio) as i64).collect();
    Ok(ts
        .iter()
        .enumerate()
        .map(|(i, &t)| (t, ts.get(i + 1).copied().unwrap_or(-1)))
        .collect())
}

/// Deterministic (eta = 0) update from `t` to `t_prev`; `t_prev = -1` is the
/// clean sample.
pub fn ddim_step(x_t: &Tensor, eps: &Tensor, t: i64, t_prev: i64, sched: &NoiseSchedule) -> Result<Tensor> {
    if t_prev >= t || t < 0 {
        return Err(Error::invalid(format!("ddim step needs t > t_prev >= -1, got {t} -> {t_prev}")));
    }
    let ab_t = sched.alpha_bar(t)?;
    let ab_p = sched.alpha_bar(t_prev)?;
    let x0 = ((x_t - (eps * (1.0 - ab_t).sqrt())?)? / ab_t.sqrt())?;
    Ok(((x0 * ab_p.sqrt())? + (eps * (1.0 - ab_p).sqrt())?)?)
}

/// Consecutive non-overlapping windows of at most `window` frames.
pub fn window_partition(len: usize, window: usize) -> Result<Vec<Range<usize>>> {
    if len == 0 {
        return Err(Error::invalid("cannot partition an empty sequence"));
    }
    if window == 0 {
        return Err(Error::invalid("window size must be at least 1"));
    }
    Ok((0..len.div_ceil(window))
        .map(|w| w * window..((w + 1) * window).min(len))
        .collect())
}

/// One temporal window: `f` skeleton maps and their initial latents, both
/// `(f, 3, H, W)`.
pub struct WindowBatch<'a> {
    pub skeletons: Tensor,
    pub latents: Tensor,
    pub bank: &'a FeatureBank,
}

/// Denoises one window and returns its `f` frames, still as `(f, 3, H, W)`
/// values in `[-1, 1]` (unclamped).
pub fn sample_window_tensor(
    model: &GestureVideoModel,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    batch: &WindowBatch,
) -> Result<Tensor> {
    if batch.skeletons.dims() != batch.latents.dims() {
        return Err(Error::shape(
            "window",
            format!("skeletons {:?} vs latents {:?}", batch.skeletons.dims(), batch.latents.dims()),
        ));
    }
    let f = batch.latents.dim(0)?;
    let mut x = batch.latents.clone();
    for (t, t_prev) in ddim_timesteps(sched.num_steps(), cfg.steps)? {
        let tf = vec![t as f64; f];
        let ctrl: ControlResiduals = model.controlnet_forward(&batch.skeletons, &x, &tf)?;
        let eps = model.backbone_forward(&x, &tf, batch.bank, &ctrl, cfg.temporal_mode)?;
        x = ddim_step(&x, &eps, t, t_prev, sched)?;
    }
    Ok(x)
}

/// Like [`sample_window_tensor`], returning frames clamped to 8-bit RGB.
pub fn sample_window(
    model: &GestureVideoModel,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    batch: &WindowBatch,
) -> Result<Vec<RgbImage>> {
    let x = sample_window_tensor(model, sched, cfg, batch)?;
    (0..x.dim(0)?).map(|i| tensor_to_rgb(&x.get(i)?)).collect()
}

/// Initial latents for every window, following `cfg.noise_mode`.
pub fn window_latents(
    windows: &[Range<usize>],
    cfg: &SamplerConfig,
    frame_shape: &[usize; 3],
    dtype: DType,
    device: &candle_core::Device,
) -> Result<Vec<Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut shape = vec![cfg.window];
    shape.extend_from_slice(frame_shape);
    let one: Vec<usize> = std::iter::once(1).chain(frame_shape.iter().copied()).collect();
    match cfg.noise_mode {
        NoiseMode::Shared => {
            let eps = normal_tensor(&mut rng, &one, dtype, device)?;
            windows
                .iter()
                .map(|w| {
                    let mut s = one.clone();
                    s[0] = w.len();
                    Ok(eps.broadcast_as(s)?.contiguous()?)
                })
                .collect()
        }
        NoiseMode::SlotShared => {
            let eps = normal_tensor(&mut rng, &shape, dtype, device)?;
            windows.iter().map(|w| Ok(eps.narrow(0, 0, w.len())?)).collect()
        }
        NoiseMode::Independent => windows
            .iter()
            .map(|w| {
                let eps = normal_tensor(&mut rng, &shape, dtype, device)?;
                Ok(eps.narrow(0, 0, w.len())?)
            })
            .collect(),
    }
}

/// Generates one frame per skeleton map. `skeletons` are `(3, H, W)`
/// tensors, `reference` is `(3, H, W)`.
pub fn generate_video(
    model: &GestureVideoModel,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    skeletons: &[Tensor],
    reference: &Tensor,
    face_mask: &Mask,
) -> Result<Vec<RgbImage>> {
    let mut frames = Vec::with_capacity(skeletons.len());
    generate_video_with(model, sched, cfg, skeletons, reference, face_mask, |_, w| {
        frames.extend_from_slice(w);
        Ok(())
    })?;
    Ok(frames)
}

/// Streaming form of [`generate_video`]: `on_window` receives the first
/// frame index and the frames of each window as soon as it is denoised.
pub fn generate_video_with(
    model: &GestureVideoModel,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    skeletons: &[Tensor],
    reference: &Tensor,
    face_mask: &Mask,
    mut on_window: impl FnMut(usize, &[RgbImage]) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    let windows = window_partition(skeletons.len(), cfg.window)?;
    let bank = model.reference_forward(&reference.unsqueeze(0)?, face_mask)?.detach();
    let (c, h, w) = reference.dims3()?;
    let latents = window_latents(&windows, cfg, &[c, h, w], model.dtype(), model.device())?;
    for (range, lat) in windows.iter().zip(latents) {
        let skel = Tensor::stack(&skeletons[range.clone()], 0)?;
        let batch = WindowBatch {
            skeletons: skel,
            latents: lat,
            bank: &bank,
        };
        on_window(range.start, &sample_window(model, sched, cfg, &batch)?)?;
    }
    Ok(())
}
