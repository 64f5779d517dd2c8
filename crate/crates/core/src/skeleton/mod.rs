//! Skeleton pipeline: labeled 3D joints to rasterized 2D skeleton maps.

mod camera;
mod io;
pub mod layout;
mod raster;

pub use camera::{project_perspective, scale_focal, CameraIntrinsics};
pub use io::{
    load_camera, load_joint_sequence, load_labeled_sequence, parse_camera, write_camera,
    write_joint_sequence, JointSequence,
};
pub use layout::{map_to_openpose_config, MappedJoints, NUM_JOINTS};
pub use raster::{rasterize, LimbTopology, RasterStyle, SkeletonMap};
pub(crate) use raster::{draw_disc, draw_segment};

use crate::error::{Error, Result};

/// One frame of joints in camera space (meters, +z forward).
#[derive(Debug, Clone, PartialEq)]
pub struct JointSet3D {
    pub positions: Vec<[f64; 3]>,
    pub valid: Vec<bool>,
    pub frame_index: u64,
}

impl JointSet3D {
    /// Joints at or behind the image plane (`z <= 0`) are marked invalid.
    pub fn new(positions: Vec<[f64; 3]>, mut valid: Vec<bool>, frame_index: u64) -> Result<Self> {
        if positions.len() != NUM_JOINTS || valid.len() != NUM_JOINTS {
            return Err(Error::invalid(format!(
                "joint set needs {NUM_JOINTS} joints and flags, got {} and {}",
                positions.len(),
                valid.len()
            )));
        }
        for (p, v) in positions.iter().zip(valid.iter_mut()) {
            if !(p[2] > 0.0) {
                *v = false;
            }
        }
        Ok(Self {
            positions,
            valid,
            frame_index,
        })
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Projected joints in pixel coordinates. Invalid joints carry no point.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSet2D {
    pub points: Vec<Option<[f64; 2]>>,
    pub frame_index: u64,
}

impl JointSet2D {
    pub fn all_invalid(frame_index: u64) -> Self {
        Self {
            points: vec![None; NUM_JOINTS],
            frame_index,
        }
    }

    pub fn is_valid(&self, joint: usize) -> bool {
        self.points[joint].is_some()
    }
}
