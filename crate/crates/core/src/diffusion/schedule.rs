use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LINEAR_BETA_START: f64 = 1e-4;
pub const LINEAR_BETA_END: f64 = 2e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::invalid(format!("unknown schedule kind `{other}`"))),
        }
    }
}

/// Serialized form stored next to checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDescriptor {
    pub kind: ScheduleKind,
    pub num_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `alpha_bar` at step `t`, with `t = -1` meaning the clean sample (1.0).
    pub fn alpha_bar(&self, t: i64) -> Result<f64> {
        if t == -1 {
            return Ok(1.0);
        }
        if t < -1 || t as usize >= self.num_steps() {
            return Err(Error::invalid(format!(
                "timestep {t} outside [-1, {})",
                self.num_steps()
            )));
        }
        Ok(self.alpha_bars[t as usize])
    }

    pub fn descriptor(&self) -> ScheduleDescriptor {
        ScheduleDescriptor {
            kind: self.kind,
            num_steps: self.num_steps(),
        }
    }

    pub fn from_descriptor(d: &ScheduleDescriptor) -> Result<Self> {
        build_schedule(d.num_steps, d.kind)
    }
}

fn cosine_alpha_bar(t: f64) -> f64 {
    const S: f64 = 0.008;
    let f = ((t + S) / (1.0 + S) * std::f64::consts::FRAC_PI_2).cos();
    f * f
}

pub fn build_schedule(num_steps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if num_steps < 1 {
        return Err(Error::invalid("schedule needs at least one step"));
    }
    let betas: Vec<f64> = match kind {
        ScheduleKind::Linear if num_steps == 1 => vec![LINEAR_BETA_START],
        ScheduleKind::Linear => (0..num_steps)
            .map(|i| {
                let a = i as f64 / (num_steps - 1) as f64;
                LINEAR_BETA_START + a * (LINEAR_BETA_END - LINEAR_BETA_START)
            })
            .collect(),
        ScheduleKind::Cosine => (0..num_steps)
            .map(|i| {
                let t0 = i as f64 / num_steps as f64;
                let t1 = (i + 1) as f64 / num_steps as f64;
                (1.0 - cosine_alpha_bar(t1) / cosine_alpha_bar(t0)).clamp(1e-8, 0.999)
            })
            .collect(),
    };
    let mut alpha_bars = Vec::with_capacity(num_steps);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bars.push(acc);
    }
    Ok(NoiseSchedule {
        kind,
        betas,
        alpha_bars,
    })
}

/// Per-sample `sqrt(alpha_bar)` and `sqrt(1 - alpha_bar)` as `(B, 1, 1, 1)`.
fn coefficients(
    sched: &NoiseSchedule,
    timesteps: &[usize],
    like: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let mut signal = Vec::with_capacity(timesteps.len());
    let mut noise = Vec::with_capacity(timesteps.len());
    for &t in timesteps {
        let ab = sched.alpha_bar(t as i64)?;
        signal.push(ab.sqrt());
        noise.push((1.0 - ab).sqrt());
    }
    let n = timesteps.len();
    let dev: &Device = like.device();
    let s = Tensor::from_vec(signal, (n, 1, 1, 1), dev)?.to_dtype(like.dtype())?;
    let e = Tensor::from_vec(noise, (n, 1, 1, 1), dev)?.to_dtype(like.dtype())?;
    Ok((s, e))
}

/// Forward noising `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps` for a batch
/// `(B, C, H, W)` with one timestep per sample.
pub fn q_sample(
    x0: &Tensor,
    timesteps: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if x0.dims() != eps.dims() {
        return Err(Error::shape(
            "q_sample",
            format!("x0 {:?} vs eps {:?}", x0.dims(), eps.dims()),
        ));
    }
    if x0.rank() != 4 || x0.dim(0)? != timesteps.len() {
        return Err(Error::shape(
            "q_sample",
            format!("{} timesteps for input {:?}", timesteps.len(), x0.dims()),
        ));
    }
    let (s, e) = coefficients(sched, timesteps, x0)?;
    Ok((x0.broadcast_mul(&s)? + eps.broadcast_mul(&e)?)?)
}
