//! The 135-slot joint layout and the relabeling step that maps named 3D joints
//! into it.
//!
//! Layout (version 1):
//!
//! | slots    | group        | count |
//! |----------|--------------|-------|
//! | 0..25    | body         | 25    |
//! | 25..46   | left hand    | 21    |
//! | 46..67   | right hand   | 21    |
//! | 67..135  | face contour | 68    |
//!
//! Body slots follow the BODY_25 ordering (neck and mid-hip anchors included).
//! Each hand is its root followed by four joints per finger, thumb to pinky.
//! Face slots are the 68-point landmark ring `face_00` .. `face_67`.

use std::collections::{BTreeSet, HashMap};
use std::ops::Range;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::skeleton::JointSet3D;

pub const NUM_JOINTS: usize = 135;
pub const LAYOUT_VERSION: u32 = 1;

pub const BODY: Range<usize> = 0..25;
pub const LEFT_HAND: Range<usize> = 25..46;
pub const RIGHT_HAND: Range<usize> = 46..67;
pub const FACE: Range<usize> = 67..135;

pub const BODY_NAMES: [&str; 25] = [
    "nose",
    "neck",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "mid_hip",
    "right_hip",
    "right_knee",
    "right_ankle",
    "left_hip",
    "left_knee",
    "left_ankle",
    "right_eye",
    "left_eye",
    "right_ear",
    "left_ear",
    "left_big_toe",
    "left_small_toe",
    "left_heel",
    "right_big_toe",
    "right_small_toe",
    "right_heel",
];

pub const FINGERS: [&str; 5] = ["thumb", "index", "middle", "ring", "pinky"];

fn hand_names(side: &str) -> Vec<String> {
    let mut names = vec![format!("{side}_hand_root")];
    for finger in FINGERS {
        for k in 1..=4 {
            names.push(format!("{side}_{finger}_{k}"));
        }
    }
    names
}

/// Slot names in layout order.
pub fn slot_names() -> &'static [String] {
    static NAMES: OnceLock<Vec<String>> = OnceLock::new();
    NAMES.get_or_init(|| {
        let mut names: Vec<String> = BODY_NAMES.iter().map(|s| s.to_string()).collect();
        names.extend(hand_names("left"));
        names.extend(hand_names("right"));
        names.extend((0..68).map(|i| format!("face_{i:02}")));
        debug_assert_eq!(names.len(), NUM_JOINTS);
        names
    })
}

pub fn slot_of(name: &str) -> Option<usize> {
    static INDEX: OnceLock<HashMap<&'static str, usize>> = OnceLock::new();
    INDEX
        .get_or_init(|| {
            slot_names()
                .iter()
                .enumerate()
                .map(|(i, n)| (n.as_str(), i))
                .collect()
        })
        .get(name)
        .copied()
}

/// Result of relabeling a named joint set into the fixed layout.
#[derive(Debug, Clone)]
pub struct MappedJoints {
    pub joints: JointSet3D,
    /// Input labels that are not part of the layout. They are dropped.
    pub unknown_labels: Vec<String>,
}

/// Copies named 3D positions into their layout slots. Slots without a matching
/// input label come out invalid.
pub fn map_to_openpose_config(
    raw: &[(String, [f64; 3])],
    frame_index: u64,
) -> Result<MappedJoints> {
    let mut positions = vec![[0.0; 3]; NUM_JOINTS];
    let mut valid = vec![false; NUM_JOINTS];
    let mut seen = BTreeSet::new();
    let mut unknown_labels = Vec::new();

    for (label, pos) in raw {
        if !seen.insert(label.as_str()) {
            return Err(Error::DuplicateLabel(label.clone()));
        }
        match slot_of(label) {
            Some(slot) => {
                positions[slot] = *pos;
                valid[slot] = true;
            }
            None => unknown_labels.push(label.clone()),
        }
    }
    for label in &unknown_labels {
        log::warn!("frame {frame_index}: ignoring unknown joint label `{label}`");
    }
    Ok(MappedJoints {
        joints: JointSet3D::new(positions, valid, frame_index)?,
        unknown_labels,
    })
}
