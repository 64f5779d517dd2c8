//! On-disk dataset layout, validation, and a synthetic toy character.
//!
//! ```text
//! <root>/frames/000000.png ...   RGB frames, numbered densely from 0
//! <root>/masks/000000.png ...    face masks (white = face), one per frame
//! <root>/joints.txt              one 135-joint record per frame
//! <root>/camera.txt              pinhole intrinsics
//! <root>/skeletons/000000.png    optional pre-rendered skeleton maps
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{frame_name, list_numbered_pngs, save_mask, save_rgb, Mask};
use crate::skeleton::layout::{FACE, LEFT_HAND, RIGHT_HAND};
use crate::skeleton::{
    draw_disc, draw_segment, load_camera, load_joint_sequence, project_perspective, rasterize, write_camera,
    write_joint_sequence, CameraIntrinsics, JointSet3D, LimbTopology, RasterStyle, SkeletonMap, NUM_JOINTS,
};

pub const FRAMES_DIR: &str = "frames";
pub const MASKS_DIR: &str = "masks";
pub const SKELETONS_DIR: &str = "skeletons";
pub const JOINTS_FILE: &str = "joints.txt";
pub const CAMERA_FILE: &str = "camera.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub frames_dir: PathBuf,
    pub masks_dir: PathBuf,
    pub joints_file: PathBuf,
    pub camera_file: PathBuf,
    /// Present when `skeletons/` holds one map per frame.
    pub skeletons_dir: Option<PathBuf>,
    pub width: u32,
    pub height: u32,
    pub frame_count: usize,
}

impl DatasetManifest {
    pub fn frame_path(&self, i: usize) -> PathBuf {
        self.frames_dir.join(frame_name(i))
    }

    pub fn mask_path(&self, i: usize) -> PathBuf {
        self.masks_dir.join(frame_name(i))
    }
}

fn dims(path: &Path) -> Result<(u32, u32)> {
    image::image_dimensions(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Numbered PNGs in `dir`, required to be exactly `0..n`.
fn dense_pngs(dir: &Path, what: &str) -> Result<Vec<PathBuf>> {
    let found = list_numbered_pngs(dir)?;
    let mut out = Vec::with_capacity(found.len());
    for (expected, (n, path)) in found.into_iter().enumerate() {
        if n != expected {
            return Err(Error::Dataset(format!(
                "{what} {expected} missing: expected {}",
                dir.join(frame_name(expected)).display()
            )));
        }
        out.push(path);
    }
    Ok(out)
}

pub fn validate_dataset(root: &Path) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::MissingFile(root.to_path_buf()));
    }
    let frames_dir = root.join(FRAMES_DIR);
    let masks_dir = root.join(MASKS_DIR);
    let joints_file = root.join(JOINTS_FILE);
    let camera_file = root.join(CAMERA_FILE);
    for p in [&joints_file, &camera_file] {
        if !p.is_file() {
            return Err(Error::MissingFile(p.clone()));
        }
    }
    let frames = dense_pngs(&frames_dir, "frame")?;
    if frames.is_empty() {
        return Err(Error::Dataset(format!("no frames in {}", frames_dir.display())));
    }
    let (width, height) = dims(&frames[0])?;
    let mut offenders = Vec::new();
    for f in &frames[1..] {
        if dims(f)? != (width, height) {
            offenders.push(f.display().to_string());
        }
    }
    for i in 0..frames.len() {
        let m = masks_dir.join(frame_name(i));
        if !m.is_file() {
            return Err(Error::MissingFile(m));
        }
        if dims(&m)? != (width, height) {
            offenders.push(m.display().to_string());
        }
    }
    if !offenders.is_empty() {
        return Err(Error::Dataset(format!(
            "resolution differs from {width}x{height} (set by {}): {}",
            frames[0].display(),
            offenders.join(", ")
        )));
    }
    let cam = load_camera(&camera_file)?;
    if (cam.width, cam.height) != (width, height) {
        return Err(Error::Dataset(format!(
            "{} describes a {}x{} image but frames are {width}x{height}",
            camera_file.display(),
            cam.width,
            cam.height
        )));
    }
    let joints = load_joint_sequence(&joints_file)?;
    if joints.frames.len() != frames.len() {
        return Err(Error::Dataset(format!(
            "{} has {} records for {} frames",
            joints_file.display(),
            joints.frames.len(),
            frames.len()
        )));
    }
    let skel_dir = root.join(SKELETONS_DIR);
    let skeletons_dir = if skel_dir.is_dir() {
        let maps = dense_pngs(&skel_dir, "skeleton map")?;
        if maps.len() != frames.len() {
            return Err(Error::Dataset(format!(
                "{} holds {} maps for {} frames",
                skel_dir.display(),
                maps.len(),
                frames.len()
            )));
        }
        for m in &maps {
            if dims(m)? != (width, height) {
                return Err(Error::Dataset(format!("{} is not {width}x{height}", m.display())));
            }
        }
        Some(skel_dir)
    } else {
        None
    };
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        frames_dir,
        masks_dir,
        joints_file,
        camera_file,
        skeletons_dir,
        width,
        height,
        frame_count: frames.len(),
    })
}

/// Projects and rasterizes one frame of joints.
pub fn render_skeleton(joints: &JointSet3D, cam: &CameraIntrinsics, style: RasterStyle) -> SkeletonMap {
    rasterize(&project_perspective(joints, cam), &LimbTopology::openpose(), cam, style)
}

/// Default skeleton style for a given image width: thin at toy scale,
/// proportionally thicker at higher resolutions.
pub fn default_style(width: u32) -> RasterStyle {
    let w = (width / 64).max(1);
    RasterStyle {
        line_width: w,
        point_radius: w,
    }
}

fn toy_joints(frame: usize, frames: usize) -> Vec<[f64; 3]> {
    let phase = 2.0 * std::f64::consts::PI * frame as f64 / frames.max(1) as f64;
    let z = 3.0;
    let mut p = vec![[0.0, 0.0, z]; NUM_JOINTS];
    let set = |p: &mut Vec<[f64; 3]>, i: usize, x: f64, y: f64| p[i] = [x, y, z];
    set(&mut p, 0, 0.0, -0.95);
    set(&mut p, 1, 0.0, -0.7);
    set(&mut p, 2, -0.35, -0.65);
    set(&mut p, 5, 0.35, -0.65);
    // arms swing in counter-phase
    let arm = |shoulder: [f64; 3], side: f64, swing: f64| {
        let a1 = 1.2 + 0.6 * swing;
        let elbow = [shoulder[0] + side * 0.4 * a1.cos(), shoulder[1] + 0.4 * a1.sin()];
        let a2 = a1 - 1.3 - 0.5 * swing;
        let wrist = [elbow[0] + side * 0.35 * a2.cos(), elbow[1] + 0.35 * a2.sin()];
        (elbow, wrist)
    };
    let (re, rw) = arm(p[2], -1.0, phase.sin());
    let (le, lw) = arm(p[5], 1.0, (phase + std::f64::consts::PI).sin());
    set(&mut p, 3, re[0], re[1]);
    set(&mut p, 4, rw[0], rw[1]);
    set(&mut p, 6, le[0], le[1]);
    set(&mut p, 7, lw[0], lw[1]);
    set(&mut p, 8, 0.0, 0.2);
    set(&mut p, 9, -0.18, 0.2);
    set(&mut p, 10, -0.2, 0.7);
    set(&mut p, 11, -0.2, 1.2);
    set(&mut p, 12, 0.18, 0.2);
    set(&mut p, 13, 0.2, 0.7);
    set(&mut p, 14, 0.2, 1.2);
    set(&mut p, 15, -0.07, -1.0);
    set(&mut p, 16, 0.07, -1.0);
    set(&mut p, 17, -0.15, -0.97);
    set(&mut p, 18, 0.15, -0.97);
    let feet = [(14, 0.08, 0.05), (14, 0.12, 0.04), (14, -0.03, 0.04), (11, -0.08, 0.05), (11, -0.12, 0.04), (11, 0.03, 0.04)];
    for (i, (base, dx, dy)) in feet.into_iter().enumerate() {
        let (x, y) = (p[base][0] + dx, p[base][1] + dy);
        set(&mut p, 19 + i, x, y);
    }
    for (range, wrist, side) in [(LEFT_HAND, lw, 1.0), (RIGHT_HAND, rw, -1.0)] {
        set(&mut p, range.start, wrist[0], wrist[1]);
        for f in 0..5 {
            let spread = -0.6 + 0.3 * f as f64;
            for j in 0..4 {
                let r = 0.03 * (j + 1) as f64;
                let ang = std::f64::consts::FRAC_PI_2 + side * spread + 0.3 * phase.cos();
                set(&mut p, range.start + 1 + 4 * f + j, wrist[0] + r * ang.cos(), wrist[1] + r * ang.sin());
            }
        }
    }
    for k in 0..FACE.len() {
        let a = 2.0 * std::f64::consts::PI * k as f64 / FACE.len() as f64;
        set(&mut p, FACE.start + k, 0.13 * a.cos(), -0.95 + 0.16 * a.sin());
    }
    p
}

/// Renders the toy character for one frame together with its face mask.
fn toy_frame(joints: &JointSet3D, cam: &CameraIntrinsics) -> (RgbImage, Mask) {
    let pts = project_perspective(joints, cam);
    let at = |i: usize| pts.points[i].expect("toy joints are in front of the camera");
    let scale = cam.width as f64 / 64.0;
    let w = |v: f64| (v * scale).round().max(1.0) as u32;
    let mut img = RgbImage::from_pixel(cam.width, cam.height, image::Rgb([40, 44, 60]));
    let shirt = [200, 70, 50];
    let pants = [50, 60, 150];
    let skin = [230, 190, 160];
    for (a, b) in [(9, 10), (10, 11), (12, 13), (13, 14)] {
        draw_segment(&mut img, at(a), at(b), w(5.0), pants);
    }
    draw_segment(&mut img, at(9), at(12), w(5.0), pants);
    draw_segment(&mut img, at(1), at(8), w(10.0), shirt);
    draw_segment(&mut img, at(2), at(5), w(5.0), shirt);
    for (a, b) in [(2, 3), (3, 4), (5, 6), (6, 7)] {
        draw_segment(&mut img, at(a), at(b), w(4.0), shirt);
    }
    for i in [4, 7] {
        draw_disc(&mut img, at(i), w(2.0), skin);
    }
    let head = at(0);
    let r = w(6.0);
    draw_disc(&mut img, head, r, skin);
    for i in [15, 16] {
        draw_disc(&mut img, at(i), 0, [30, 30, 30]);
    }
    let rr = r as f64;
    let mask = Mask::from_fn(cam.width, cam.height, |x, y| {
        let dx = x as f64 - head[0].round();
        let dy = y as f64 - head[1].round();
        dx * dx + dy * dy <= rr * rr
    });
    (img, mask)
}

/// Writes a synthetic dataset of `frames` frames at `size x size` into `root`.
pub fn synthesize_toy(root: &Path, frames: usize, size: u32) -> Result<DatasetManifest> {
    if frames == 0 || size < 16 {
        return Err(Error::invalid("toy dataset needs at least one frame and 16 pixels"));
    }
    let s = size as f64 / 64.0;
    let cam = CameraIntrinsics::new(64.0 * s, 64.0 * s, size as f64 / 2.0, size as f64 / 2.0 - 2.0 * s, size, size)?;
    for d in [FRAMES_DIR, MASKS_DIR] {
        let p = root.join(d);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut seq = Vec::with_capacity(frames);
    for i in 0..frames {
        let joints = JointSet3D::new(toy_joints(i, frames), vec![true; NUM_JOINTS], i as u64)?;
        let (img, mask) = toy_frame(&joints, &cam);
        save_rgb(&root.join(FRAMES_DIR).join(frame_name(i)), &img)?;
        save_mask(&root.join(MASKS_DIR).join(frame_name(i)), &mask)?;
        seq.push(joints);
    }
    write_joint_sequence(&root.join(JOINTS_FILE), &seq)?;
    write_camera(&root.join(CAMERA_FILE), &cam)?;
    validate_dataset(root)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_dataset_validates() {
        let dir = tempfile::tempdir().unwrap();
        let m = synthesize_toy(dir.path(), 8, 64).unwrap();
        assert_eq!(m.frame_count, 8);
        assert_eq!((m.width, m.height), (64, 64));
        let mask = crate::imaging::load_mask(&m.mask_path(0)).unwrap();
        assert!(mask.count() > 50 && mask.count() < 400);
    }

    #[test]
    fn missing_frame_is_named() {
        let dir = tempfile::tempdir().unwrap();
        synthesize_toy(dir.path(), 8, 64).unwrap();
        fs::remove_file(dir.path().join(FRAMES_DIR).join(frame_name(3))).unwrap();
        let err = validate_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("frame 3") && err.contains("000003.png"), "{err}");
    }

    #[test]
    fn mismatched_mask_is_named() {
        let dir = tempfile::tempdir().unwrap();
        synthesize_toy(dir.path(), 4, 64).unwrap();
        let p = dir.path().join(MASKS_DIR).join(frame_name(2));
        save_mask(&p, &Mask::filled(32, 32, false)).unwrap();
        let err = validate_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("masks/000002.png"), "{err}");
    }
}
