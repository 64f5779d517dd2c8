//! Image I/O and conversions between 8-bit images and model tensors.
//!
//! Model tensors are NCHW with values in `[-1, 1]`.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::{GrayImage, RgbImage};

use crate::error::{Error, Result};

/// Binary per-pixel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32, data: Vec<bool>) -> Result<Self> {
        if data.len() != (width * height) as usize {
            return Err(Error::invalid(format!(
                "mask data has {} entries for {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, value: bool) -> Self {
        Self {
            width,
            height,
            data: vec![value; (width * height) as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let data = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self {
            width,
            height,
            data,
        }
    }

    /// Pixels above mid-gray count as set.
    pub fn from_gray(img: &GrayImage) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            data: img.pixels().map(|p| p.0[0] > 127).collect(),
        }
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            image::Luma([if self.get(x, y) { 255 } else { 0 }])
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[(y * self.width + x) as usize]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    /// Thresholded coverage on a `rows x cols` grid: a cell is set when more
    /// than half of its pixels are set. The mask size must be a multiple of
    /// the grid size.
    pub fn downsample_coverage(&self, rows: usize, cols: usize) -> Result<Vec<bool>> {
        let (h, w) = (self.height as usize, self.width as usize);
        if rows == 0 || cols == 0 || h % rows != 0 || w % cols != 0 {
            return Err(Error::invalid(format!(
                "cannot pool a {w}x{h} mask onto a {cols}x{rows} grid"
            )));
        }
        let (ch, cw) = (h / rows, w / cols);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let mut hits = 0usize;
                for y in r * ch..(r + 1) * ch {
                    for x in c * cw..(c + 1) * cw {
                        hits += self.data[y * w + x] as usize;
                    }
                }
                // hits / (ch * cw) > 0.5
                out.push(2 * hits > ch * cw);
            }
        }
        Ok(out)
    }
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8())
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(Mask::from_gray(&img.to_luma8()))
}

pub fn save_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    mask.to_gray().save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn frame_name(index: usize) -> String {
    format!("{index:06}.png")
}

/// PNG files in `dir` whose stem is a decimal frame number, sorted by number.
pub fn list_numbered_pngs(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if let Ok(n) = stem.parse::<usize>() {
            out.push((n, path));
        }
    }
    out.sort();
    Ok(out)
}

/// `(3, H, W)` tensor in `[-1, 1]`.
pub fn rgb_to_tensor(img: &RgbImage, dtype: DType, device: &Device) -> Result<Tensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut planar = vec![0f32; 3 * h * w];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            planar[c * h * w + i] = px.0[c] as f32 / 127.5 - 1.0;
        }
    }
    Ok(Tensor::from_vec(planar, (3, h, w), device)?.to_dtype(dtype)?)
}

/// Inverse of [`rgb_to_tensor`]; values are clamped to the valid range.
pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::shape("tensor_to_rgb", format!("expected 3 channels, got {c}")));
    }
    let data: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let px = |ch: usize| ((data[ch * h * w + i] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
        image::Rgb([px(0), px(1), px(2)])
    }))
}
