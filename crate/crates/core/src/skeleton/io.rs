//! Text formats for joint sequences and cameras.
//!
//! Joint sequence (`.txt`): one frame per line, whitespace separated:
//! the frame index, then 135 `x y z` triples in layout order, then 135
//! validity bits (`0` or `1`). Blank lines and lines starting with `#` are
//! skipped. Frame indices must be strictly increasing.
//!
//! Labeled joint sequence (`.jsonl`): one JSON object per line,
//! `{"frame_index": 0, "joints": [["nose", x, y, z], ...]}`. Labels are
//! relabeled into the layout with [`map_to_openpose_config`].
//!
//! Camera: `key = value` lines for `fx`, `fy`, `cx`, `cy`, `width`, `height`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::skeleton::layout::{map_to_openpose_config, NUM_JOINTS};
use crate::skeleton::{CameraIntrinsics, JointSet3D};

#[derive(Debug, Clone, Default)]
pub struct JointSequence {
    pub frames: Vec<JointSet3D>,
    /// `(previous, next)` frame indices around every hole in the numbering.
    pub gaps: Vec<(u64, u64)>,
}

fn read(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn finish_sequence(path: &Path, frames: Vec<(usize, JointSet3D)>) -> Result<JointSequence> {
    let mut gaps = Vec::new();
    for w in frames.windows(2) {
        let (prev, next) = (w[0].1.frame_index, w[1].1.frame_index);
        if next <= prev {
            return Err(parse_err(
                path,
                w[1].0,
                format!("frame_index {next} does not increase after {prev}"),
            ));
        }
        if next > prev + 1 {
            gaps.push((prev, next));
        }
    }
    for (prev, next) in &gaps {
        log::warn!("{}: frames {}..{} missing", path.display(), prev + 1, next);
    }
    Ok(JointSequence {
        frames: frames.into_iter().map(|(_, f)| f).collect(),
        gaps,
    })
}

pub fn parse_joint_sequence(path: &Path, text: &str) -> Result<JointSequence> {
    let expected = 1 + 3 * NUM_JOINTS + NUM_JOINTS;
    let mut frames = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != expected {
            let joints = (fields.len().saturating_sub(1)) / 4;
            return Err(parse_err(
                path,
                line_no,
                format!(
                    "record {} has {} fields (~{joints} joints), expected {expected} for {NUM_JOINTS} joints",
                    fields[0],
                    fields.len()
                ),
            ));
        }
        let frame_index: u64 = fields[0]
            .parse()
            .map_err(|_| parse_err(path, line_no, format!("bad frame_index `{}`", fields[0])))?;
        let mut positions = Vec::with_capacity(NUM_JOINTS);
        for j in 0..NUM_JOINTS {
            let mut p = [0.0; 3];
            for (k, v) in p.iter_mut().enumerate() {
                let tok = fields[1 + 3 * j + k];
                *v = tok.parse().map_err(|_| {
                    parse_err(path, line_no, format!("record {frame_index}: bad coordinate `{tok}`"))
                })?;
            }
            positions.push(p);
        }
        let valid = fields[1 + 3 * NUM_JOINTS..]
            .iter()
            .map(|t| match *t {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(parse_err(
                    path,
                    line_no,
                    format!("record {frame_index}: validity bit `{other}` is not 0/1"),
                )),
            })
            .collect::<Result<Vec<_>>>()?;
        frames.push((line_no, JointSet3D::new(positions, valid, frame_index)?));
    }
    finish_sequence(path, frames)
}

pub fn load_joint_sequence(path: &Path) -> Result<JointSequence> {
    let text = read(path)?;
    parse_joint_sequence(path, &text)
}

pub fn format_joint_sequence(frames: &[JointSet3D]) -> String {
    let mut out = String::new();
    for f in frames {
        write!(out, "{}", f.frame_index).unwrap();
        for p in &f.positions {
            write!(out, " {:?} {:?} {:?}", p[0], p[1], p[2]).unwrap();
        }
        for v in &f.valid {
            out.push_str(if *v { " 1" } else { " 0" });
        }
        out.push('\n');
    }
    out
}

pub fn write_joint_sequence(path: &Path, frames: &[JointSet3D]) -> Result<()> {
    fs::write(path, format_joint_sequence(frames)).map_err(|e| Error::io(path, e))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LabeledRecord {
    frame_index: u64,
    joints: Vec<(String, f64, f64, f64)>,
}

/// Loads a labeled `.jsonl` sequence and relabels every frame into the layout.
pub fn load_labeled_sequence(path: &Path) -> Result<JointSequence> {
    let text = read(path)?;
    let mut frames = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let rec: LabeledRecord =
            serde_json::from_str(line).map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        let raw: Vec<(String, [f64; 3])> =
            rec.joints.into_iter().map(|(n, x, y, z)| (n, [x, y, z])).collect();
        let mapped = map_to_openpose_config(&raw, rec.frame_index).map_err(|e| match e {
            Error::DuplicateLabel(l) => parse_err(path, i + 1, format!("duplicate joint label `{l}`")),
            other => other,
        })?;
        frames.push((i + 1, mapped.joints));
    }
    finish_sequence(path, frames)
}

pub fn parse_camera(path: &Path, text: &str) -> Result<CameraIntrinsics> {
    let mut vals: [Option<f64>; 6] = [None; 6];
    const KEYS: [&str; 6] = ["fx", "fy", "cx", "cy", "width", "height"];
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .or_else(|| line.split_once(':'))
            .or_else(|| line.split_once(char::is_whitespace))
            .ok_or_else(|| parse_err(path, i + 1, format!("expected `key = value`, got `{line}`")))?;
        let key = key.trim();
        let slot = KEYS
            .iter()
            .position(|k| *k == key)
            .ok_or_else(|| parse_err(path, i + 1, format!("unknown camera key `{key}`")))?;
        if vals[slot].is_some() {
            return Err(parse_err(path, i + 1, format!("duplicate camera key `{key}`")));
        }
        let v: f64 = value
            .trim()
            .parse()
            .map_err(|_| parse_err(path, i + 1, format!("bad value for `{key}`")))?;
        vals[slot] = Some(v);
    }
    let get = |k: usize| {
        vals[k].ok_or_else(|| parse_err(path, 0, format!("missing camera key `{}`", KEYS[k])))
    };
    let dim = |k: usize| -> Result<u32> {
        let v = get(k)?;
        if v < 1.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
            return Err(parse_err(path, 0, format!("`{}` must be a positive integer", KEYS[k])));
        }
        Ok(v as u32)
    };
    CameraIntrinsics::new(get(0)?, get(1)?, get(2)?, get(3)?, dim(4)?, dim(5)?).map_err(|e| {
        parse_err(path, 0, e.to_string())
    })
}

pub fn load_camera(path: &Path) -> Result<CameraIntrinsics> {
    let text = read(path)?;
    parse_camera(path, &text)
}

pub fn write_camera(path: &Path, cam: &CameraIntrinsics) -> Result<()> {
    let text = format!(
        "fx = {:?}\nfy = {:?}\ncx = {:?}\ncy = {:?}\nwidth = {}\nheight = {}\n",
        cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height
    );
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
