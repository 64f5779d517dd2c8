//! Command-line surface: `project`, `synth`, `train`, `generate`, `eval`.
//!
//! Exit codes: 0 on success, 1 for usage or validation errors, 2 for
//! failures during compute or I/O.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{parse_config, ResolvedConfig};
use crate::dataset::{default_style, render_skeleton, synthesize_toy, validate_dataset};
use crate::diffusion::{checkpoint, AttentionMode, NoiseSchedule};
use crate::error::{Error, Result};
use crate::eval::{evaluate_run, PooledProjection};
use crate::imaging::{frame_name, list_numbered_pngs, load_mask, load_rgb, rgb_to_tensor, save_rgb};
use crate::inference::{generate_video_with, NoiseMode, SamplerConfig};
use crate::skeleton::{
    load_camera, load_joint_sequence, load_labeled_sequence, scale_focal, JointSequence, RasterStyle,
};
use crate::training::{fit, FrameDataset};

/// Overrides the default output root (`./out`). Explicit `--out` wins.
pub const OUT_ENV: &str = "GESTURE_VIDEO_OUT";
pub const RUN_RECORD: &str = "run.json";

#[derive(Debug, Parser)]
#[command(name = "gesture-video", version, about = "Pose-conditioned gesture video generation")]
pub struct Cli {
    /// TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.total_steps=200`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Project a 3D joint sequence into numbered skeleton PNGs.
    Project(ProjectArgs),
    /// Write a small synthetic dataset.
    Synth(SynthArgs),
    /// Fine-tune the reference network on a dataset.
    Train(TrainArgs),
    /// Generate frames from a checkpoint, a reference frame and skeletons.
    Generate(GenerateArgs),
    /// Compare generated frames against reference frames.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    /// Joint sequence (`.txt`, or labeled `.jsonl`).
    #[arg(long)]
    pub joints: PathBuf,
    #[arg(long)]
    pub camera: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Multiply fx and fy by this factor before projecting.
    #[arg(long, default_value_t = 1.0)]
    pub focal_scale: f64,
    #[arg(long)]
    pub line_width: Option<u32>,
    #[arg(long)]
    pub point_radius: Option<u32>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    #[arg(long, default_value_t = 64)]
    pub size: u32,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset root. Supplies the reference frame, its face mask and the
    /// driving skeletons unless those are given explicitly.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Frame of `--data` used as reference.
    #[arg(long, default_value_t = 0)]
    pub reference_index: usize,
    /// Reference RGB image.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Face mask of the reference image.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Directory of numbered skeleton PNGs (e.g. from `project`).
    #[arg(long, conflicts_with = "joints")]
    pub skeletons: Option<PathBuf>,
    /// Joint sequence to project on the fly; needs `--camera`.
    #[arg(long, requires = "camera")]
    pub joints: Option<PathBuf>,
    #[arg(long)]
    pub camera: Option<PathBuf>,
    /// Only generate the first N frames.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides sample.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides sample.window.
    #[arg(long)]
    pub window: Option<usize>,
    /// `all-frames` or `per-frame`; overrides sample.temporal_mode.
    #[arg(long)]
    pub temporal_mode: Option<AttentionMode>,
    /// `shared`, `slot-shared` or `independent`; overrides sample.noise_mode.
    #[arg(long)]
    pub noise_mode: Option<NoiseMode>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub generated: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    /// Face masks; when given both sides are masked before comparison.
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Report path; defaults to `<out>/metrics.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Written next to every run's outputs.
#[derive(Debug, Serialize)]
pub struct RunRecord<'a> {
    pub command: &'static str,
    pub args: Vec<String>,
    pub resolved: &'a ResolvedConfig,
    pub seed: u64,
    pub checkpoint_sha256: Option<String>,
    /// Sampler settings after command-line overrides (generate only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampler: Option<SamplerConfig>,
    /// Files written, in order (generate only).
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub outputs: Vec<String>,
    pub version: &'static str,
}

fn out_dir(explicit: &Option<PathBuf>, command: &str) -> PathBuf {
    match explicit {
        Some(p) => p.clone(),
        None => std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("out"))
            .join(command),
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_record(dir: &Path, record: &RunRecord) -> Result<()> {
    let path = dir.join(RUN_RECORD);
    let text = serde_json::to_string_pretty(record).map_err(|e| Error::invalid(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn load_joints(path: &Path) -> Result<JointSequence> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        load_labeled_sequence(path)
    } else {
        load_joint_sequence(path)
    }
}

fn cmd_project(a: &ProjectArgs, out: &Path) -> Result<usize> {
    let cam = scale_focal(&load_camera(&a.camera)?, a.focal_scale)?;
    let seq = load_joints(&a.joints)?;
    let d = default_style(cam.width);
    let style = RasterStyle::new(a.line_width.unwrap_or(d.line_width), a.point_radius.unwrap_or(d.point_radius))?;
    create_dir(out)?;
    for (i, joints) in seq.frames.iter().enumerate() {
        save_rgb(&out.join(frame_name(i)), &render_skeleton(joints, &cam, style).pixels)?;
    }
    Ok(seq.frames.len())
}

/// The sampler settings a `generate` invocation actually uses.
fn sampler_for(a: &GenerateArgs, cfg: &ResolvedConfig) -> Result<SamplerConfig> {
    let mut sample = cfg.config.sample.clone();
    if let Some(m) = a.temporal_mode {
        sample.temporal_mode = m;
    }
    if let Some(m) = a.noise_mode {
        sample.noise_mode = m;
    }
    if let Some(s) = a.seed {
        sample.seed = s;
    }
    if let Some(w) = a.window {
        sample.window = w;
    }
    sample.validate()?;
    Ok(sample)
}

fn cmd_generate(a: &GenerateArgs, sample: &SamplerConfig, out: &Path) -> Result<Vec<String>> {
    let manifest = a.data.as_deref().map(validate_dataset).transpose()?;
    let need = |what: &str| Error::invalid(format!("{what} needed: pass it explicitly or give --data"));
    let (ref_path, mask_path) = match &manifest {
        Some(m) => {
            if a.reference_index >= m.frame_count {
                return Err(Error::invalid(format!(
                    "reference index {} out of range for {} frames",
                    a.reference_index, m.frame_count
                )));
            }
            (
                a.reference.clone().unwrap_or_else(|| m.frame_path(a.reference_index)),
                a.mask.clone().unwrap_or_else(|| m.mask_path(a.reference_index)),
            )
        }
        None => (
            a.reference.clone().ok_or_else(|| need("--reference"))?,
            a.mask.clone().ok_or_else(|| need("--mask"))?,
        ),
    };
    if !a.checkpoint.is_file() {
        return Err(Error::MissingFile(a.checkpoint.clone()));
    }
    let dev = Device::Cpu;
    let dtype = DType::F32;
    let reference = load_rgb(&ref_path)?;
    let mask = load_mask(&mask_path)?;
    let skeletons: Vec<Tensor> = if let Some(dir) = &a.skeletons {
        list_numbered_pngs(dir)?
            .into_iter()
            .map(|(_, p)| rgb_to_tensor(&load_rgb(&p)?, dtype, &dev))
            .collect::<Result<_>>()?
    } else if let (Some(j), Some(c)) = (&a.joints, &a.camera) {
        let cam = load_camera(c)?;
        load_joints(j)?
            .frames
            .iter()
            .map(|f| rgb_to_tensor(&render_skeleton(f, &cam, default_style(cam.width)).pixels, dtype, &dev))
            .collect::<Result<_>>()?
    } else {
        let m = manifest.as_ref().ok_or_else(|| need("--skeletons or --joints"))?;
        FrameDataset::load(m, dtype, &dev)?.skeletons
    };
    let n = a.frames.unwrap_or(skeletons.len()).min(skeletons.len());
    if n == 0 {
        return Err(Error::invalid("no skeleton maps to generate from"));
    }
    let loaded = checkpoint::load(&a.checkpoint, dtype, &dev)?;
    let mc = loaded.model.config();
    let want = [3, mc.height, mc.width];
    if let Some(s) = skeletons.iter().find(|s| s.dims() != want) {
        return Err(Error::invalid(format!(
            "skeleton maps are {:?}, checkpoint expects {want:?}",
            s.dims()
        )));
    }
    if [3, reference.height() as usize, reference.width() as usize] != want {
        return Err(Error::invalid(format!(
            "{} is {}x{}, checkpoint expects {}x{}",
            ref_path.display(),
            reference.width(),
            reference.height(),
            mc.width,
            mc.height
        )));
    }
    let sched = NoiseSchedule::from_descriptor(&loaded.manifest.schedule)?;
    let reference = rgb_to_tensor(&reference, dtype, &dev)?;
    create_dir(out)?;
    let mut written = Vec::with_capacity(n);
    generate_video_with(&loaded.model, &sched, sample, &skeletons[..n], &reference, &mask, |start, frames| {
        for (k, f) in frames.iter().enumerate() {
            let name = frame_name(start + k);
            save_rgb(&out.join(&name), f)?;
            written.push(name);
        }
        log::info!("wrote frames {}..{}", start, start + frames.len());
        Ok(())
    })?;
    Ok(written)
}

fn execute(cli: &Cli, argv: &[String]) -> Result<()> {
    let resolved = parse_config(cli.config.as_deref(), &cli.overrides)?;
    let record = |command: &'static str, seed: u64, checkpoint_sha256: Option<String>| RunRecord {
        command,
        args: argv.to_vec(),
        resolved: &resolved,
        seed,
        checkpoint_sha256,
        sampler: None,
        outputs: Vec::new(),
        version: env!("CARGO_PKG_VERSION"),
    };
    match &cli.command {
        Command::Project(a) => {
            let out = out_dir(&a.out, "project");
            let n = cmd_project(a, &out)?;
            write_record(&out, &record("project", 0, None))?;
            println!("wrote {n} skeleton maps to {}", out.display());
        }
        Command::Synth(a) => {
            let out = out_dir(&a.out, "synth");
            let m = synthesize_toy(&out, a.frames, a.size)?;
            write_record(&out, &record("synth", 0, None))?;
            println!("wrote {} frames to {}", m.frame_count, out.display());
        }
        Command::Train(a) => {
            let out = out_dir(&a.out, "train");
            let manifest = validate_dataset(&a.data)?;
            let c = &resolved.config;
            let data = FrameDataset::load(&manifest, DType::F32, &Device::Cpu)?;
            create_dir(&out)?;
            write_record(&out, &record("train", c.train.seed, None))?;
            let fitted = fit(&data, &c.model, &c.train, &out)?;
            let hash = checkpoint::file_hash(&fitted.checkpoint)?;
            write_record(&out, &record("train", c.train.seed, Some(hash)))?;
            if let Some(last) = fitted.losses.last() {
                println!("final loss {last:.6}");
            }
            println!("checkpoint {}", fitted.checkpoint.display());
        }
        Command::Generate(a) => {
            let out = out_dir(&a.out, "generate");
            let sample = sampler_for(a, &resolved)?;
            let hash = if a.checkpoint.is_file() {
                Some(checkpoint::file_hash(&a.checkpoint)?)
            } else {
                None
            };
            let written = cmd_generate(a, &sample, &out)?;
            let mut rec = record("generate", sample.seed, hash);
            rec.sampler = Some(sample);
            rec.outputs = written;
            write_record(&out, &rec)?;
            println!("wrote {} frames to {}", rec.outputs.len(), out.display());
        }
        Command::Eval(a) => {
            let out = out_dir(&a.out, "eval");
            create_dir(&out)?;
            let report_path = a.report.clone().unwrap_or_else(|| out.join("metrics.json"));
            let report = evaluate_run(
                &a.generated,
                &a.reference,
                a.masks.as_deref(),
                &PooledProjection::default(),
                Some(&report_path),
            )?;
            write_record(&out, &record("eval", 0, None))?;
            println!("frames {}", report.frame_count);
            println!("ssim {:.6}", report.ssim_mean);
            match report.psnr_mean.db() {
                Some(db) => println!("psnr {db:.4}"),
                None => println!("psnr identical"),
            }
            if let Some(fd) = report.frechet {
                println!("frechet {fd:.6}");
            }
            println!("report {}", report_path.display());
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let argv: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}
