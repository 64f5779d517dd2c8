//! Frame fidelity metrics (SSIM, PSNR) and a Fréchet feature distance.

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::imaging::{list_numbered_pngs, load_mask, load_rgb, Mask};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);
const EIGEN_CLAMP: f64 = 1e-10;

fn same_size(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::invalid(format!(
            "image sizes differ: {:?} vs {:?}",
            a.dimensions(),
            b.dimensions()
        )));
    }
    Ok(())
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM over every full 11x11 window position and the three channels.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    same_size(a, b)?;
    let (w, h) = (a.width() as usize, a.height() as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid(format!("SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")));
    }
    let g = gaussian_window();
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = a.pixels().map(|p| p.0[c] as f64).collect();
        let y: Vec<f64> = b.pixels().map(|p| p.0[c] as f64).collect();
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (ky, gy) in g.iter().enumerate() {
                    let row = (oy + ky) * w + ox;
                    for (kx, gx) in g.iter().enumerate() {
                        let wt = gy * gx;
                        let (xv, yv) = (x[row + kx], y[row + kx]);
                        mx += wt * xv;
                        my += wt * yv;
                        sxx += wt * xv * xv;
                        syy += wt * yv * yv;
                        sxy += wt * xv * yv;
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cov = sxy - mx * my;
                total += ((2.0 * mx * my + C1) * (2.0 * cov + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2));
            }
        }
    }
    Ok(total / (3 * ow * oh) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Identical,
    Db(f64),
}

impl Psnr {
    pub fn db(self) -> Option<f64> {
        match self {
            Psnr::Identical => None,
            Psnr::Db(v) => Some(v),
        }
    }
}

impl Serialize for Psnr {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Psnr::Identical => s.serialize_str("identical"),
            Psnr::Db(v) => s.serialize_f64(*v),
        }
    }
}

pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<Psnr> {
    same_size(a, b)?;
    let n = a.as_raw().len() as f64;
    let se: f64 = a
        .as_raw()
        .iter()
        .zip(b.as_raw())
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum();
    if se == 0.0 {
        return Ok(Psnr::Identical);
    }
    Ok(Psnr::Db(10.0 * (255.0f64 * 255.0 / (se / n)).log10()))
}

fn mean_and_cov(x: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.len();
    let d = x[0].len();
    let m = DMatrix::from_fn(n, d, |i, j| x[i][j]);
    let mu = DVector::from_fn(d, |j, _| m.column(j).sum() / n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mu[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mu, cov)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let vals = eig.eigenvalues.map(|v| if v > EIGEN_CLAMP { v.sqrt() } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + tr(Sa + Sb - 2 (Sa Sb)^(1/2))` with unbiased
/// covariances. The cross term uses `tr(sqrt(sqrt(Sa) Sb sqrt(Sa)))`, which
/// only needs symmetric eigendecompositions; eigenvalues below `1e-10` are
/// treated as zero.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("Fréchet distance needs at least two samples per set"));
    }
    let d = a[0].len();
    if d == 0 || a.iter().chain(b).any(|v| v.len() != d) {
        return Err(Error::invalid("feature vectors must share one nonzero dimension"));
    }
    let (mu_a, sa) = mean_and_cov(a);
    let (mu_b, sb) = mean_and_cov(b);
    let diff = (&mu_a - &mu_b).norm_squared();
    let root_a = psd_sqrt(&sa);
    let mid = &root_a * &sb * &root_a;
    let mid = (&mid + mid.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(mid)
        .eigenvalues
        .iter()
        .map(|v| if *v > EIGEN_CLAMP { v.sqrt() } else { 0.0 })
        .sum();
    // tiny negative values are rounding noise
    Ok((diff + sa.trace() + sb.trace() - 2.0 * cross).max(0.0))
}

/// Zeroes every pixel outside the mask.
pub fn apply_mask(frames: &[RgbImage], masks: &[Mask]) -> Result<Vec<RgbImage>> {
    if frames.len() != masks.len() {
        return Err(Error::invalid(format!("{} frames but {} masks", frames.len(), masks.len())));
    }
    frames
        .iter()
        .zip(masks)
        .enumerate()
        .map(|(i, (f, m))| {
            if (m.width(), m.height()) != f.dimensions() {
                return Err(Error::invalid(format!("mask {i} does not match its frame size")));
            }
            let mut out = f.clone();
            for (x, y, p) in out.enumerate_pixels_mut() {
                if !m.get(x, y) {
                    p.0 = [0, 0, 0];
                }
            }
            Ok(out)
        })
        .collect()
}

/// Maps frames to fixed-length feature vectors.
pub trait FeatureExtractor {
    fn name(&self) -> &str;
    fn version(&self) -> u32;
    fn dim(&self) -> usize;
    fn extract(&self, frames: &[RgbImage]) -> Result<Vec<Vec<f64>>>;
}

/// Grayscale frames average-pooled onto an 8x8 grid, then multiplied by a
/// fixed seeded Gaussian matrix.
pub struct PooledProjection {
    dim: usize,
    matrix: Vec<Vec<f64>>,
}

pub const POOL: usize = 8;

impl PooledProjection {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / ((POOL * POOL) as f64).sqrt();
        let matrix = (0..dim)
            .map(|_| {
                (0..POOL * POOL)
                    .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * scale)
                    .collect()
            })
            .collect();
        Self { dim, matrix }
    }

    fn pooled(frame: &RgbImage) -> Vec<f64> {
        let (w, h) = (frame.width() as usize, frame.height() as usize);
        let mut sums = vec![0.0; POOL * POOL];
        let mut counts = vec![0usize; POOL * POOL];
        for (x, y, p) in frame.enumerate_pixels() {
            let gy = (y as usize * POOL) / h;
            let gx = (x as usize * POOL) / w;
            let lum = 0.299 * p.0[0] as f64 + 0.587 * p.0[1] as f64 + 0.114 * p.0[2] as f64;
            sums[gy * POOL + gx] += lum / 255.0;
            counts[gy * POOL + gx] += 1;
        }
        sums.iter().zip(counts).map(|(s, c)| if c > 0 { s / c as f64 } else { 0.0 }).collect()
    }
}

impl Default for PooledProjection {
    fn default() -> Self {
        Self::new(8, 0x5eed)
    }
}

impl FeatureExtractor for PooledProjection {
    fn name(&self) -> &str {
        "pooled-gray-projection"
    }

    fn version(&self) -> u32 {
        1
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, frames: &[RgbImage]) -> Result<Vec<Vec<f64>>> {
        Ok(frames
            .iter()
            .map(|f| {
                let v = Self::pooled(f);
                self.matrix.iter().map(|row| row.iter().zip(&v).map(|(a, b)| a * b).sum()).collect()
            })
            .collect())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FrameMetrics {
    pub index: usize,
    pub ssim: f64,
    pub psnr: Psnr,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub note: String,
    pub frame_count: usize,
    pub masked: bool,
    pub frames: Vec<FrameMetrics>,
    pub ssim_mean: f64,
    /// Mean over frames that are not identical; `identical` when all are.
    pub psnr_mean: Psnr,
    pub frechet: Option<f64>,
    pub extractor: String,
    pub extractor_version: u32,
    /// Reserved for a perceptual metric; always null here.
    pub lpips: Option<f64>,
}

pub const REPORT_NOTE: &str = "features come from a fixed random projection of pooled grayscale frames; \
the Fréchet value is not comparable to distances computed with a pretrained video network";

fn load_dir(dir: &Path) -> Result<Vec<(PathBuf, RgbImage)>> {
    list_numbered_pngs(dir)?
        .into_iter()
        .map(|(_, p)| load_rgb(&p).map(|img| (p, img)))
        .collect()
}

/// Compares numbered frames in `generated` against `reference`, optionally
/// masking both with `masks`, and writes the report as JSON to `report_path`.
pub fn evaluate_run(
    generated: &Path,
    reference: &Path,
    masks: Option<&Path>,
    extractor: &dyn FeatureExtractor,
    report_path: Option<&Path>,
) -> Result<MetricsReport> {
    let gen = load_dir(generated)?;
    let refs = load_dir(reference)?;
    if gen.len() != refs.len() {
        return Err(Error::invalid(format!(
            "{} has {} frames, {} has {}",
            generated.display(),
            gen.len(),
            reference.display(),
            refs.len()
        )));
    }
    if gen.is_empty() {
        return Err(Error::invalid(format!("no frames in {}", generated.display())));
    }
    for ((gp, g), (rp, r)) in gen.iter().zip(&refs) {
        if g.dimensions() != r.dimensions() {
            return Err(Error::invalid(format!(
                "{} and {} differ in size",
                gp.display(),
                rp.display()
            )));
        }
    }
    let mut g: Vec<RgbImage> = gen.into_iter().map(|(_, i)| i).collect();
    let mut r: Vec<RgbImage> = refs.into_iter().map(|(_, i)| i).collect();
    if let Some(md) = masks {
        let ms = list_numbered_pngs(md)?
            .into_iter()
            .take(g.len())
            .map(|(_, p)| load_mask(&p))
            .collect::<Result<Vec<_>>>()?;
        g = apply_mask(&g, &ms)?;
        r = apply_mask(&r, &ms)?;
    }
    let mut frames = Vec::with_capacity(g.len());
    for (i, (a, b)) in g.iter().zip(&r).enumerate() {
        frames.push(FrameMetrics {
            index: i,
            ssim: ssim(a, b)?,
            psnr: psnr(a, b)?,
        });
    }
    let n = frames.len();
    let ssim_mean = frames.iter().map(|f| f.ssim).sum::<f64>() / n as f64;
    let finite: Vec<f64> = frames.iter().filter_map(|f| f.psnr.db()).collect();
    let psnr_mean = if finite.is_empty() {
        Psnr::Identical
    } else {
        Psnr::Db(finite.iter().sum::<f64>() / finite.len() as f64)
    };
    let frechet = if n >= 2 {
        Some(frechet_distance(&extractor.extract(&g)?, &extractor.extract(&r)?)?)
    } else {
        None
    };
    let report = MetricsReport {
        note: REPORT_NOTE.to_string(),
        frame_count: n,
        masked: masks.is_some(),
        frames,
        ssim_mean,
        psnr_mean,
        frechet,
        extractor: extractor.name().to_string(),
        extractor_version: extractor.version(),
        lpips: None,
    };
    if let Some(path) = report_path {
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::invalid(e.to_string()))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))?;
    }
    Ok(report)
}
