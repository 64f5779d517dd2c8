//! Deterministic skeleton rasterization (no anti-aliasing).
//!
//! Sub-pixel coordinates are rounded half away from zero before drawing. A
//! segment of width `w` covers every pixel whose center lies within `w / 2`
//! of the rounded segment; a point of radius `r` covers the closed disc of
//! radius `r`. Edges are drawn first, then points, so joint dots sit on top.

use image::RgbImage;

use crate::error::{Error, Result};
use crate::skeleton::layout::{BODY, FACE, LEFT_HAND, NUM_JOINTS, RIGHT_HAND};
use crate::skeleton::{CameraIntrinsics, JointSet2D};

pub type Rgb = [u8; 3];

/// Limb pairs with colors, plus one dot color per joint.
#[derive(Debug, Clone)]
pub struct LimbTopology {
    edges: Vec<(usize, usize, Rgb)>,
    point_color: Vec<Rgb>,
}

// BODY_25 keypoint palette; an edge takes the color of its distal joint.
const BODY_COLORS: [Rgb; 25] = [
    [255, 0, 85],
    [255, 0, 0],
    [255, 85, 0],
    [255, 170, 0],
    [255, 255, 0],
    [170, 255, 0],
    [85, 255, 0],
    [0, 255, 0],
    [255, 0, 0],
    [0, 255, 85],
    [0, 255, 170],
    [0, 255, 255],
    [0, 170, 255],
    [0, 85, 255],
    [0, 0, 255],
    [255, 0, 170],
    [170, 0, 255],
    [255, 0, 255],
    [85, 0, 255],
    [0, 0, 255],
    [0, 0, 255],
    [0, 0, 255],
    [0, 255, 255],
    [0, 255, 255],
    [0, 255, 255],
];

const BODY_EDGES: [(usize, usize); 24] = [
    (1, 8),
    (1, 2),
    (1, 5),
    (2, 3),
    (3, 4),
    (5, 6),
    (6, 7),
    (8, 9),
    (9, 10),
    (10, 11),
    (8, 12),
    (12, 13),
    (13, 14),
    (1, 0),
    (0, 15),
    (15, 17),
    (0, 16),
    (16, 18),
    (14, 19),
    (19, 20),
    (14, 21),
    (11, 22),
    (22, 23),
    (11, 24),
];

fn hsv_rainbow(i: usize, n: usize) -> Rgb {
    let h = i as f64 / n as f64 * 6.0;
    let sector = h.floor() as i32 % 6;
    let f = h - h.floor();
    let (r, g, b) = match sector {
        0 => (1.0, f, 0.0),
        1 => (1.0 - f, 1.0, 0.0),
        2 => (0.0, 1.0, f),
        3 => (0.0, 1.0 - f, 1.0),
        4 => (f, 0.0, 1.0),
        _ => (1.0, 0.0, 1.0 - f),
    };
    [r, g, b].map(|c: f64| (c * 255.0).round() as u8)
}

impl LimbTopology {
    pub fn new(edges: Vec<(usize, usize, Rgb)>, point_color: Vec<Rgb>) -> Result<Self> {
        if point_color.len() != NUM_JOINTS {
            return Err(Error::invalid(format!(
                "topology needs {NUM_JOINTS} point colors, got {}",
                point_color.len()
            )));
        }
        for &(a, b, _) in &edges {
            if a >= NUM_JOINTS || b >= NUM_JOINTS {
                return Err(Error::invalid(format!("edge ({a}, {b}) out of range")));
            }
            if a == b {
                return Err(Error::invalid(format!("self-edge on joint {a}")));
            }
        }
        Ok(Self { edges, point_color })
    }

    /// The shipped drawing convention: colored body limbs, rainbow hand bones,
    /// blue hand dots and white face dots.
    pub fn openpose() -> Self {
        let mut edges: Vec<(usize, usize, Rgb)> = BODY_EDGES
            .iter()
            .map(|&(a, b)| (BODY.start + a, BODY.start + b, BODY_COLORS[b]))
            .collect();
        for hand in [LEFT_HAND, RIGHT_HAND] {
            let mut k = 0;
            for finger in 0..5 {
                let base = 1 + finger * 4;
                let chain = [0, base, base + 1, base + 2, base + 3];
                for w in chain.windows(2) {
                    edges.push((hand.start + w[0], hand.start + w[1], hsv_rainbow(k, 20)));
                    k += 1;
                }
            }
        }
        let mut point_color = vec![[0, 0, 0]; NUM_JOINTS];
        for i in BODY {
            point_color[i] = BODY_COLORS[i - BODY.start];
        }
        for i in LEFT_HAND.chain(RIGHT_HAND) {
            point_color[i] = [0, 0, 255];
        }
        for i in FACE {
            point_color[i] = [255, 255, 255];
        }
        Self::new(edges, point_color).expect("shipped topology is valid")
    }

    pub fn edges(&self) -> &[(usize, usize, Rgb)] {
        &self.edges
    }

    pub fn point_color(&self, joint: usize) -> Rgb {
        self.point_color[joint]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RasterStyle {
    pub line_width: u32,
    pub point_radius: u32,
}

impl RasterStyle {
    pub fn new(line_width: u32, point_radius: u32) -> Result<Self> {
        if line_width < 1 || point_radius < 1 {
            return Err(Error::invalid("line width and point radius must be >= 1"));
        }
        Ok(Self {
            line_width,
            point_radius,
        })
    }
}

impl Default for RasterStyle {
    fn default() -> Self {
        Self {
            line_width: 1,
            point_radius: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonMap {
    pub pixels: RgbImage,
    pub frame_index: u64,
}

impl SkeletonMap {
    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }
}

fn round_px(p: [f64; 2]) -> [f64; 2] {
    // f64::round is half-away-from-zero
    [p[0].round(), p[1].round()]
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, image::Rgb(c));
    }
}

fn clip_range(lo: f64, hi: f64, size: u32) -> Option<(i64, i64)> {
    let lo = lo.floor().max(0.0);
    let hi = hi.ceil().min(size as f64 - 1.0);
    if !lo.is_finite() || !hi.is_finite() || lo > hi {
        return None;
    }
    Some((lo as i64, hi as i64))
}

pub(crate) fn draw_segment(img: &mut RgbImage, a: [f64; 2], b: [f64; 2], width: u32, c: Rgb) {
    let half = width as f64 / 2.0;
    let Some((x0, x1)) = clip_range(a[0].min(b[0]) - half, a[0].max(b[0]) + half, img.width())
    else {
        return;
    };
    let Some((y0, y1)) = clip_range(a[1].min(b[1]) - half, a[1].max(b[1]) + half, img.height())
    else {
        return;
    };
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    for y in y0..=y1 {
        for x in x0..=x1 {
            let p = [x as f64 - a[0], y as f64 - a[1]];
            let t = if len2 > 0.0 {
                ((p[0] * d[0] + p[1] * d[1]) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let e = [p[0] - t * d[0], p[1] - t * d[1]];
            if e[0] * e[0] + e[1] * e[1] <= half * half {
                put(img, x, y, c);
            }
        }
    }
}

pub(crate) fn draw_disc(img: &mut RgbImage, center: [f64; 2], radius: u32, c: Rgb) {
    let r = radius as f64;
    let Some((x0, x1)) = clip_range(center[0] - r, center[0] + r, img.width()) else {
        return;
    };
    let Some((y0, y1)) = clip_range(center[1] - r, center[1] + r, img.height()) else {
        return;
    };
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 - center[0];
            let dy = y as f64 - center[1];
            if dx * dx + dy * dy <= r * r {
                put(img, x, y, c);
            }
        }
    }
}

/// Draws every edge with both endpoints valid, then every valid joint, on a
/// black canvas of the camera's size.
pub fn rasterize(
    joints: &JointSet2D,
    topo: &LimbTopology,
    cam: &CameraIntrinsics,
    style: RasterStyle,
) -> SkeletonMap {
    let mut img = RgbImage::new(cam.width, cam.height);
    for &(a, b, color) in topo.edges() {
        if let (Some(pa), Some(pb)) = (joints.points[a], joints.points[b]) {
            draw_segment(&mut img, round_px(pa), round_px(pb), style.line_width, color);
        }
    }
    for (i, p) in joints.points.iter().enumerate() {
        if let Some(p) = p {
            draw_disc(&mut img, round_px(*p), style.point_radius, topo.point_color(i));
        }
    }
    SkeletonMap {
        pixels: img,
        frame_index: joints.frame_index,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam64() -> CameraIntrinsics {
        CameraIntrinsics::new(50.0, 50.0, 32.0, 32.0, 64, 64).unwrap()
    }

    #[test]
    fn all_invalid_renders_black() {
        let map = rasterize(
            &JointSet2D::all_invalid(0),
            &LimbTopology::openpose(),
            &cam64(),
            RasterStyle::new(3, 2).unwrap(),
        );
        assert!(map.pixels.as_raw().iter().all(|&b| b == 0));
        assert_eq!((map.width(), map.height()), (64, 64));
    }

    #[test]
    fn single_point_stays_inside_its_disc() {
        let mut j = JointSet2D::all_invalid(0);
        j.points[0] = Some([10.0, 10.0]);
        let map = rasterize(&j, &LimbTopology::openpose(), &cam64(), RasterStyle::new(1, 2).unwrap());
        let mut lit = 0;
        for (x, y, px) in map.pixels.enumerate_pixels() {
            let d2 = (x as i64 - 10).pow(2) + (y as i64 - 10).pow(2);
            if px.0 != [0, 0, 0] {
                assert!(d2 <= 4, "pixel ({x},{y}) outside disc");
                lit += 1;
            } else {
                assert!(d2 > 4, "pixel ({x},{y}) inside disc but unlit");
            }
        }
        // 13 lattice points satisfy dx^2 + dy^2 <= 4
        assert_eq!(lit, 13);
    }

    #[test]
    fn half_coordinates_round_away_from_zero() {
        let mut j = JointSet2D::all_invalid(0);
        j.points[0] = Some([10.5, 20.5]);
        let map = rasterize(&j, &LimbTopology::openpose(), &cam64(), RasterStyle::new(1, 1).unwrap());
        assert_ne!(map.pixels.get_pixel(11, 21).0, [0, 0, 0]);
        assert_eq!(map.pixels.get_pixel(9, 20).0, [0, 0, 0]);
    }

    #[test]
    fn segment_is_clipped_not_dropped() {
        let mut j = JointSet2D::all_invalid(0);
        // neck -> right shoulder, running off the right edge
        j.points[1] = Some([40.0, 30.0]);
        j.points[2] = Some([200.0, 30.0]);
        let map = rasterize(&j, &LimbTopology::openpose(), &cam64(), RasterStyle::new(1, 1).unwrap());
        assert_eq!(map.pixels.get_pixel(63, 30).0, BODY_COLORS[2]);
        assert_eq!(map.pixels.get_pixel(63, 32).0, [0, 0, 0]);
    }

    #[test]
    fn rendering_is_deterministic() {
        let mut j = JointSet2D::all_invalid(0);
        for i in 0..NUM_JOINTS {
            j.points[i] = Some([(i * 7 % 64) as f64 + 0.3, (i * 13 % 64) as f64 - 0.5]);
        }
        let t = LimbTopology::openpose();
        let a = rasterize(&j, &t, &cam64(), RasterStyle::new(2, 1).unwrap());
        let b = rasterize(&j, &t, &cam64(), RasterStyle::new(2, 1).unwrap());
        assert_eq!(a.pixels.as_raw(), b.pixels.as_raw());
    }

    #[test]
    fn topology_rejects_bad_edges() {
        let colors = vec![[1, 1, 1]; NUM_JOINTS];
        assert!(LimbTopology::new(vec![(3, 3, [0, 0, 0])], colors.clone()).is_err());
        assert!(LimbTopology::new(vec![(0, 135, [0, 0, 0])], colors).is_err());
        assert_eq!(LimbTopology::openpose().edges().len(), 24 + 40);
    }

    #[test]
    fn style_rejects_zero_width() {
        assert!(RasterStyle::new(0, 1).is_err());
        assert!(RasterStyle::new(1, 0).is_err());
    }
}
