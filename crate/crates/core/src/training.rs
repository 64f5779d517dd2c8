//! Fine-tuning of the reference network against the noise-prediction loss.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{default_style, render_skeleton, DatasetManifest};
use crate::diffusion::checkpoint;
use crate::diffusion::{
    build_schedule, q_sample, AttentionMode, BankLayer, FeatureBank, GestureVideoModel, ModelConfig, NoiseSchedule,
    ParamGroup, ScheduleKind,
};
use crate::error::{Error, Result};
use crate::imaging::{load_mask, load_rgb, rgb_to_tensor, Mask};
use crate::skeleton::{load_camera, load_joint_sequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub schedule_steps: usize,
    pub schedule_kind: ScheduleKind,
    /// Steps between checkpoints; 0 writes only the initial and final ones.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 1,
            total_steps: 1000,
            seed: 0,
            schedule_steps: 1000,
            schedule_kind: ScheduleKind::Linear,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.schedule_steps < 1 {
            return Err(Error::Config("schedule_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Frames, face masks and skeleton maps held in memory as `(3, H, W)`
/// tensors in `[-1, 1]`.
pub struct FrameDataset {
    pub frames: Vec<Tensor>,
    pub masks: Vec<Mask>,
    pub skeletons: Vec<Tensor>,
}

impl FrameDataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Loads a validated dataset. Skeleton maps come from `skeletons/` when
    /// present and are rendered from the joints otherwise.
    pub fn load(m: &DatasetManifest, dtype: DType, device: &Device) -> Result<Self> {
        let mut frames = Vec::with_capacity(m.frame_count);
        let mut masks = Vec::with_capacity(m.frame_count);
        for i in 0..m.frame_count {
            frames.push(rgb_to_tensor(&load_rgb(&m.frame_path(i))?, dtype, device)?);
            masks.push(load_mask(&m.mask_path(i))?);
        }
        let skeletons = match &m.skeletons_dir {
            Some(dir) => (0..m.frame_count)
                .map(|i| rgb_to_tensor(&load_rgb(&dir.join(crate::imaging::frame_name(i)))?, dtype, device))
                .collect::<Result<Vec<_>>>()?,
            None => {
                let cam = load_camera(&m.camera_file)?;
                let seq = load_joint_sequence(&m.joints_file)?;
                seq.frames
                    .iter()
                    .map(|j| rgb_to_tensor(&render_skeleton(j, &cam, default_style(cam.width)).pixels, dtype, device))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        Ok(Self {
            frames,
            masks,
            skeletons,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainingTriplet {
    pub target_index: usize,
    pub reference_index: usize,
    pub skeleton: Tensor,
    pub target: Tensor,
    pub reference: Tensor,
    pub reference_mask: Mask,
}

/// Target uniform over `0..n`; reference uniform over the other frames, or
/// the target itself when `n == 1`.
pub fn sample_triplet_indices(n: usize, rng: &mut impl Rng) -> Result<(usize, usize)> {
    if n == 0 {
        return Err(Error::Dataset("cannot sample from an empty dataset".into()));
    }
    let target = rng.random_range(0..n);
    if n == 1 {
        return Ok((0, 0));
    }
    let r = rng.random_range(0..n - 1);
    Ok((target, if r >= target { r + 1 } else { r }))
}

pub fn sample_training_triplet(ds: &FrameDataset, rng: &mut impl Rng) -> Result<TrainingTriplet> {
    let (t, r) = sample_triplet_indices(ds.len(), rng)?;
    Ok(TrainingTriplet {
        target_index: t,
        reference_index: r,
        skeleton: ds.skeletons[t].clone(),
        target: ds.frames[t].clone(),
        reference: ds.frames[r].clone(),
        reference_mask: ds.masks[r].clone(),
    })
}

/// Standard-normal tensor drawn from `rng`.
pub fn normal_tensor(rng: &mut impl Rng, shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, device)?.to_dtype(dtype)?)
}

/// Per-parameter trainable flags, grouped by sub-network.
#[derive(Debug, Clone, Serialize)]
pub struct FreezeReport {
    pub entries: Vec<FreezeEntry>,
    pub total_params: usize,
    pub trainable_params: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct FreezeEntry {
    pub name: String,
    pub group: String,
    pub numel: usize,
    pub trainable: bool,
}

/// Verifies that exactly the reference network is trainable.
pub fn freeze_check(model: &GestureVideoModel) -> Result<FreezeReport> {
    let mut entries = Vec::new();
    for (name, p) in model.params().iter() {
        let group = ParamGroup::of(name)
            .ok_or_else(|| Error::Freeze(format!("`{name}` belongs to no known sub-network")))?;
        let should = group == ParamGroup::Reference;
        if p.trainable != should {
            return Err(Error::Freeze(format!(
                "`{name}` ({}) is marked {}",
                group.label(),
                if p.trainable { "trainable" } else { "frozen" }
            )));
        }
        if should && p.var.is_none() {
            return Err(Error::Freeze(format!("`{name}` is trainable but not tracked by autograd")));
        }
        entries.push(FreezeEntry {
            name: name.clone(),
            group: group.label().to_string(),
            numel: p.numel(),
            trainable: p.trainable,
        });
    }
    let total_params = entries.iter().map(|e| e.numel).sum();
    let trainable_params = entries.iter().filter(|e| e.trainable).map(|e| e.numel).sum();
    Ok(FreezeReport {
        entries,
        total_params,
        trainable_params,
    })
}

pub struct StepOutcome {
    pub loss: f64,
    pub timesteps: Vec<usize>,
}

fn stack_bank(banks: Vec<FeatureBank>) -> Result<FeatureBank> {
    if banks.len() == 1 {
        return Ok(banks.into_iter().next().expect("one bank"));
    }
    let layers = banks[0].layers.len();
    let mut out = Vec::with_capacity(layers);
    for l in 0..layers {
        let toks: Vec<&Tensor> = banks.iter().map(|b| &b.layers[l].tokens).collect();
        out.push(BankLayer {
            tokens: Tensor::cat(&toks, 0)?,
            flags: banks[0].layers[l].flags.clone(),
            grid: banks[0].layers[l].grid,
        });
    }
    Ok(FeatureBank { layers: out })
}

fn norms_summary(model: &GestureVideoModel) -> String {
    match model.params().norms() {
        Ok(n) => n.iter().fold(String::new(), |mut s, (g, v)| {
            let _ = write!(s, "{}={v:.4e} ", g.label());
            s
        }),
        Err(e) => format!("unavailable ({e})"),
    }
}

/// One optimizer step on a batch of triplets. Only the reference network
/// (including its magnification gains) receives gradients.
pub fn train_step(
    model: &GestureVideoModel,
    opt: &mut AdamW,
    sched: &NoiseSchedule,
    batch: &[TrainingTriplet],
    rng: &mut impl Rng,
) -> Result<StepOutcome> {
    let b = batch.len();
    if b == 0 {
        return Err(Error::invalid("empty training batch"));
    }
    let dtype = model.dtype();
    let dev = model.device().clone();
    let mut banks = Vec::with_capacity(b);
    for tr in batch {
        banks.push(model.reference_forward(&tr.reference.unsqueeze(0)?, &tr.reference_mask)?);
    }
    let bank = stack_bank(banks)?;
    let x0 = Tensor::stack(&batch.iter().map(|t| &t.target).collect::<Vec<_>>(), 0)?;
    let skel = Tensor::stack(&batch.iter().map(|t| &t.skeleton).collect::<Vec<_>>(), 0)?;
    let timesteps: Vec<usize> = (0..b).map(|_| rng.random_range(0..sched.num_steps())).collect();
    let eps = normal_tensor(rng, x0.dims(), dtype, &dev)?;
    let x_t = q_sample(&x0, &timesteps, &eps, sched)?;
    let tf: Vec<f64> = timesteps.iter().map(|&t| t as f64).collect();
    let ctrl = model.controlnet_forward(&skel, &x_t, &tf)?.detach();
    let pred = model.backbone_forward(&x_t, &tf, &bank, &ctrl, AttentionMode::PerFrame)?;
    let loss = (pred - &eps)?.sqr()?.mean_all()?;
    let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            loss: value,
            timesteps,
            norms: norms_summary(model),
        });
    }
    opt.backward_step(&loss)?;
    Ok(StepOutcome { loss: value, timesteps })
}

pub fn new_optimizer(model: &GestureVideoModel, lr: f64) -> Result<AdamW> {
    let params = ParamsAdamW {
        lr,
        ..Default::default()
    };
    Ok(AdamW::new(model.params().trainable_vars(), params)?)
}

/// Hashes of the frozen sub-networks, used to prove they never move.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FrozenHashes {
    pub backbone: String,
    pub control: String,
    pub null_ctx: String,
}

impl FrozenHashes {
    pub fn of(model: &GestureVideoModel) -> Result<Self> {
        let p = model.params();
        Ok(Self {
            backbone: p.group_hash(ParamGroup::Backbone)?,
            control: p.group_hash(ParamGroup::Control)?,
            null_ctx: p.group_hash(ParamGroup::NullContext)?,
        })
    }
}

/// Result of [`fit`].
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub checkpoint: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub losses: Vec<f64>,
    pub frozen: FrozenHashes,
}

pub const LOSS_LOG: &str = "loss.log";

pub fn checkpoint_name(step: usize) -> String {
    format!("ckpt-{step:06}.bin")
}

/// Trains a freshly initialized model for `cfg.total_steps` steps, writing
/// checkpoints and a `step loss` log into `out_dir`.
pub fn fit(
    data: &FrameDataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<FitOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("cannot train on an empty dataset".into()));
    }
    let dims = data.frames[0].dims();
    if dims != [3, model_cfg.height, model_cfg.width] {
        return Err(Error::Dataset(format!(
            "frames are {:?}, model expects (3, {}, {})",
            dims, model_cfg.height, model_cfg.width
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let device = Device::Cpu;
    let model = GestureVideoModel::new(model_cfg, cfg.seed, DType::F32, &device)?;
    let sched = build_schedule(cfg.schedule_steps, cfg.schedule_kind)?;
    let mut opt = new_optimizer(&model, cfg.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let frozen = FrozenHashes::of(&model)?;
    let log_path = out_dir.join(LOSS_LOG);
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut checkpoints = Vec::new();
    let mut losses = Vec::with_capacity(cfg.total_steps);

    let save = |step: usize, checkpoints: &mut Vec<PathBuf>| -> Result<()> {
        let gammas = model.gammas()?;
        if let Some(g) = gammas.iter().find(|g| !(**g > 1.0)) {
            return Err(Error::invalid(format!("magnification gain {g} is not above 1 at step {step}")));
        }
        if FrozenHashes::of(&model)? != frozen {
            return Err(Error::Freeze(format!("frozen parameters changed by step {step}")));
        }
        let path = out_dir.join(checkpoint_name(step));
        checkpoint::save(&path, &model, sched.descriptor(), step as u64)?;
        checkpoints.push(path);
        Ok(())
    };

    if cfg.total_steps == 0 {
        save(0, &mut checkpoints)?;
    }
    for step in 1..=cfg.total_steps {
        freeze_check(&model)?;
        let batch = (0..cfg.batch_size)
            .map(|_| sample_training_triplet(data, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let out = train_step(&model, &mut opt, &sched, &batch, &mut rng)?;
        writeln!(log, "{step} {}", out.loss).map_err(|e| Error::io(&log_path, e))?;
        losses.push(out.loss);
        if step % 100 == 0 {
            log::info!("step {step}/{}: loss {:.5}", cfg.total_steps, out.loss);
        }
        let due = cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0;
        if due || step == cfg.total_steps {
            save(step, &mut checkpoints)?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    Ok(FitOutcome {
        checkpoint: checkpoints.last().cloned().expect("at least one checkpoint"),
        checkpoints,
        losses,
        frozen,
    })
}

/// Parses a `step loss` log.
pub fn read_loss_log(path: &Path) -> Result<Vec<(usize, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let mut it = l.split_whitespace();
            let parse_err = |msg: &str| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: msg.to_string(),
            };
            let step = it.next().and_then(|s| s.parse().ok()).ok_or_else(|| parse_err("bad step"))?;
            let loss = it.next().and_then(|s| s.parse().ok()).ok_or_else(|| parse_err("bad loss"))?;
            Ok((step, loss))
        })
        .collect()
}

/// Means of consecutive non-overlapping windows of `w` values; a trailing
/// partial window is dropped.
pub fn window_means(values: &[f64], w: usize) -> Vec<f64> {
    values.chunks_exact(w.max(1)).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}
