use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{JointSet2D, JointSet3D};

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::invalid(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(Error::invalid(format!(
                "cx={} outside [0, {})",
                self.cx, self.width
            )));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::invalid(format!(
                "cy={} outside [0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }

    /// Projects a single camera-space point. `None` for points with `z <= 0`.
    pub fn project_point(&self, p: [f64; 3]) -> Option<[f64; 2]> {
        let [x, y, z] = p;
        if !(z > 0.0) {
            return None;
        }
        Some([self.fx * x / z + self.cx, self.fy * y / z + self.cy])
    }
}

/// Projects every valid joint with `u = fx x / z + cx`, `v = fy y / z + cy`.
/// Points that land outside the image stay valid; clipping is left to the
/// rasterizer.
pub fn project_perspective(joints: &JointSet3D, cam: &CameraIntrinsics) -> JointSet2D {
    let points = joints
        .positions
        .iter()
        .zip(&joints.valid)
        .map(|(p, &v)| if v { cam.project_point(*p) } else { None })
        .collect();
    JointSet2D {
        points,
        frame_index: joints.frame_index,
    }
}

/// Multiplies both focal lengths by `s`, keeping the principal point and the
/// image size. Projections scale about the principal point by the same factor.
pub fn scale_focal(cam: &CameraIntrinsics, s: f64) -> Result<CameraIntrinsics> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::invalid(format!("focal scale must be positive, got {s}")));
    }
    Ok(CameraIntrinsics {
        fx: cam.fx * s,
        fy: cam.fy * s,
        ..*cam
    })
}
