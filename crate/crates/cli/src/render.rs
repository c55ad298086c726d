//! Orthographic front-view stick figures, one PNG per sampled frame.

use std::path::{Path, PathBuf};

use choreo_core::motion::{forward_kinematics, JointPositions, MotionSequence, SkeletonTemplate, JOINT_NAMES, NUM_JOINTS};
use image::{Rgb, RgbImage};

use crate::error::{CliError, Result};

const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const GROUND: Rgb<u8> = Rgb([190, 190, 190]);
const LEFT: Rgb<u8> = Rgb([40, 90, 200]);
const RIGHT: Rgb<u8> = Rgb([200, 60, 40]);
const MIDDLE: Rgb<u8> = Rgb([30, 30, 30]);

/// Visible world extent, meters: the frame spans this width and height
/// around the root, with the ground a tenth of the way up.
const VIEW_M: f64 = 2.4;

fn side_color(j: usize) -> Rgb<u8> {
    let name = JOINT_NAMES[j];
    if name.starts_with("left") {
        LEFT
    } else if name.starts_with("right") {
        RIGHT
    } else {
        MIDDLE
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

/// Bresenham, two pixels thick.
fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, c);
        put(img, x + 1, y, c);
        put(img, x, y + 1, c);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Frame `t` of precomputed joint positions on a `size x size` canvas.
pub fn render_frame(positions: &JointPositions, t: usize, skeleton: &SkeletonTemplate, size: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(size, size, BACKGROUND);
    let joints = positions.frame(t);
    let scale = size as f64 / VIEW_M;
    let cx = joints[0].x;
    let to_px = |x: f64, y: f64| -> (i64, i64) {
        let u = (x - cx) * scale + size as f64 / 2.0;
        let v = size as f64 * 0.9 - y * scale;
        (u.round() as i64, v.round() as i64)
    };
    let (_, ground) = to_px(cx, 0.0);
    for x in 0..size as i64 {
        put(&mut img, x, ground, GROUND);
    }
    for j in 0..NUM_JOINTS {
        if let Some(p) = skeleton.parent_index[j] {
            line(&mut img, to_px(joints[p].x, joints[p].y), to_px(joints[j].x, joints[j].y), side_color(j));
        }
    }
    for (j, q) in joints.iter().enumerate() {
        let (u, v) = to_px(q.x, q.y);
        for du in -1..=1 {
            for dv in -1..=1 {
                put(&mut img, u + du, v + dv, side_color(j));
            }
        }
    }
    img
}

/// Frames `0, every_n, 2 every_n, ...` written as `frame_{t:05}.png` under `out_dir`.
pub fn render_motion(
    motion: &MotionSequence,
    skeleton: &SkeletonTemplate,
    out_dir: &Path,
    every_n: usize,
    size: u32,
) -> Result<Vec<PathBuf>> {
    if every_n == 0 || size < 8 {
        return Err(CliError::Validation("every_n must be >= 1 and size >= 8".into()));
    }
    let positions = forward_kinematics(motion, skeleton)?;
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let mut written = Vec::new();
    for t in (0..motion.frames()).step_by(every_n) {
        let path = out_dir.join(format!("frame_{t:05}.png"));
        render_frame(&positions, t, skeleton, size)
            .save(&path)
            .map_err(|e| CliError::Image { path: path.clone(), reason: e.to_string() })?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use choreo_core::motion::REST_PELVIS_HEIGHT;

    fn rest(frames: usize) -> MotionSequence {
        let mut m = MotionSequence::rest(frames, 10.0, Default::default());
        m.root_translation.iter_mut().for_each(|p| p.y = REST_PELVIS_HEIGHT);
        m
    }

    #[test]
    fn every_n_equal_to_length_gives_one_frame() {
        let dir = tempfile::tempdir().unwrap();
        let files = render_motion(&rest(12), &SkeletonTemplate::default(), dir.path(), 12, 64).unwrap();
        assert_eq!(files.len(), 1);
        let files = render_motion(&rest(12), &SkeletonTemplate::default(), dir.path(), 5, 64).unwrap();
        assert_eq!(files.len(), 3);
        assert!(render_motion(&rest(2), &SkeletonTemplate::default(), dir.path(), 0, 64).is_err());
    }

    #[test]
    fn figure_is_drawn_above_the_ground() {
        let sk = SkeletonTemplate::default();
        let pos = forward_kinematics(&rest(1), &sk).unwrap();
        let img = render_frame(&pos, 0, &sk, 128);
        let inked = img.pixels().filter(|p| **p != BACKGROUND && **p != GROUND).count();
        assert!(inked > 100, "{inked}");
        let ground_row = (128.0 * 0.9f64).round() as u32;
        assert_eq!(*img.get_pixel(0, ground_row), GROUND);
    }
}
