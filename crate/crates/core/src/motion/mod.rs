//! Canonical motion containers and the geometry shared by every other module.

mod kinematics;
mod rotation;
mod skeleton;

pub use kinematics::{
    derive_contact_labels, forward_kinematics, forward_kinematics_vjp, project_keypoints,
    ContactThresholds, FkCache, JointPositions,
};
pub(crate) use kinematics::forward_kinematics_cached;
pub use rotation::{
    axis_angle, matrix_to_rot6d, rot6d_matrix_vjp, rot6d_to_matrix, Rot6d, DEGENERACY_EPS,
};
pub use skeleton::{
    joint, SkeletonTemplate, COCO_NAMES, JOINT_NAMES, NUM_FOOT_POINTS, NUM_JOINTS, NUM_KEYPOINTS,
    REST_PELVIS_HEIGHT,
};

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub const ROTATION_WIDTH: usize = NUM_JOINTS * 6;
pub const TRANSLATION_WIDTH: usize = 3;
/// Flattened per-frame width: 24 6D rotations, root translation, 4 contact flags.
pub const POSE_WIDTH: usize = ROTATION_WIDTH + TRANSLATION_WIDTH + NUM_FOOT_POINTS;
pub const KEYPOINT_WIDTH: usize = NUM_KEYPOINTS * 2;

#[derive(Debug, Clone, PartialEq)]
pub struct MotionSequence {
    pub fps: f64,
    /// Frame-major, `frames * NUM_JOINTS` entries.
    pub rotations: Vec<Rot6d>,
    pub root_translation: Vec<Vector3<f64>>,
    /// Left heel, left toe, right heel, right toe.
    pub contacts: Vec<[bool; NUM_FOOT_POINTS]>,
}

impl MotionSequence {
    /// A motion holding the rest pose at the given root position.
    pub fn rest(frames: usize, fps: f64, root: Vector3<f64>) -> Self {
        MotionSequence {
            fps,
            rotations: vec![Rot6d::IDENTITY; frames * NUM_JOINTS],
            root_translation: vec![root; frames],
            contacts: vec![[false; NUM_FOOT_POINTS]; frames],
        }
    }

    pub fn frames(&self) -> usize {
        self.root_translation.len()
    }

    pub fn duration_s(&self) -> f64 {
        self.frames() as f64 / self.fps
    }

    pub fn rotation(&self, t: usize, j: usize) -> &Rot6d {
        &self.rotations[t * NUM_JOINTS + j]
    }

    pub fn rotation_mut(&mut self, t: usize, j: usize) -> &mut Rot6d {
        &mut self.rotations[t * NUM_JOINTS + j]
    }

    pub fn frame_rotations(&self, t: usize) -> &[Rot6d] {
        &self.rotations[t * NUM_JOINTS..(t + 1) * NUM_JOINTS]
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.frames();
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::InvalidMotion(format!("fps must be positive, got {}", self.fps)));
        }
        if self.rotations.len() != t * NUM_JOINTS || self.contacts.len() != t {
            return Err(Error::InvalidMotion(format!(
                "streams disagree on frame count ({} rotations, {} translations, {} contact rows)",
                self.rotations.len(),
                t,
                self.contacts.len()
            )));
        }
        let finite = self.rotations.iter().all(|r| r.0.iter().all(|v| v.is_finite()))
            && self.root_translation.iter().all(|p| p.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::InvalidMotion("non-finite pose values".into()));
        }
        Ok(())
    }

    /// Row-major `frames x POSE_WIDTH` layout used by files and models.
    pub fn to_rows(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.frames() * POSE_WIDTH);
        for t in 0..self.frames() {
            for r in self.frame_rotations(t) {
                out.extend(r.0.iter().map(|&v| v as f32));
            }
            out.extend(self.root_translation[t].iter().map(|&v| v as f32));
            out.extend(self.contacts[t].iter().map(|&c| if c { 1.0 } else { 0.0 }));
        }
        out
    }

    /// Inverse of [`MotionSequence::to_rows`]. Contact channels are binarized at 0.5,
    /// so probabilities are accepted; pass logits through a sigmoid first.
    pub fn from_rows(rows: &[f32], fps: f64) -> Result<Self> {
        if rows.len() % POSE_WIDTH != 0 {
            return Err(Error::InvalidMotion(format!(
                "row data length {} is not a multiple of {POSE_WIDTH}",
                rows.len()
            )));
        }
        let frames = rows.len() / POSE_WIDTH;
        let mut motion = MotionSequence::rest(frames, fps, Vector3::zeros());
        for (t, row) in rows.chunks_exact(POSE_WIDTH).enumerate() {
            for j in 0..NUM_JOINTS {
                let r = &row[j * 6..j * 6 + 6];
                *motion.rotation_mut(t, j) = Rot6d(std::array::from_fn(|k| r[k] as f64));
            }
            let tr = &row[ROTATION_WIDTH..ROTATION_WIDTH + 3];
            motion.root_translation[t] = Vector3::new(tr[0] as f64, tr[1] as f64, tr[2] as f64);
            let c = &row[ROTATION_WIDTH + 3..];
            motion.contacts[t] = std::array::from_fn(|k| c[k] >= 0.5);
        }
        motion.validate()?;
        Ok(motion)
    }

    /// Frames `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        MotionSequence {
            fps: self.fps,
            rotations: self.rotations[start * NUM_JOINTS..end * NUM_JOINTS].to_vec(),
            root_translation: self.root_translation[start..end].to_vec(),
            contacts: self.contacts[start..end].to_vec(),
        }
    }

    pub fn trajectory(&self) -> TrajectorySequence {
        TrajectorySequence {
            fps: self.fps,
            positions: self.root_translation.clone(),
        }
    }

    /// Reflects the motion through the body's sagittal plane (x -> -x),
    /// exchanging left and right joints.
    pub fn mirrored(&self, skeleton: &SkeletonTemplate) -> Result<Self> {
        let m = Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0));
        let mut out = self.clone();
        for t in 0..self.frames() {
            for j in 0..NUM_JOINTS {
                let r = self.rotation(t, skeleton.mirror_map[j]).to_matrix()?;
                *out.rotation_mut(t, j) = Rot6d::from_matrix(&(m * r * m))?;
            }
            let p = self.root_translation[t];
            out.root_translation[t] = Vector3::new(-p.x, p.y, p.z);
            let c = self.contacts[t];
            out.contacts[t] = [c[2], c[3], c[0], c[1]];
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keypoints2DSequence {
    pub fps: f64,
    /// Frame-major, `frames * NUM_KEYPOINTS` pixel coordinates in COCO order.
    pub points: Vec<[f64; 2]>,
    pub confidence: Vec<f64>,
}

impl Keypoints2DSequence {
    pub fn frames(&self) -> usize {
        self.points.len() / NUM_KEYPOINTS
    }

    pub fn point(&self, t: usize, k: usize) -> [f64; 2] {
        self.points[t * NUM_KEYPOINTS + k]
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() % NUM_KEYPOINTS != 0 || self.confidence.len() != self.points.len() {
            return Err(Error::InvalidMotion("keypoint arrays are not 17-wide per frame".into()));
        }
        if self.confidence.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidMotion("keypoint confidence outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn slice(&self, start: usize, end: usize) -> Self {
        Keypoints2DSequence {
            fps: self.fps,
            points: self.points[start * NUM_KEYPOINTS..end * NUM_KEYPOINTS].to_vec(),
            confidence: self.confidence[start * NUM_KEYPOINTS..end * NUM_KEYPOINTS].to_vec(),
        }
    }

    /// Row-major `frames x 34` (x, y interleaved).
    pub fn to_rows(&self) -> Vec<f32> {
        self.points.iter().flat_map(|p| [p[0] as f32, p[1] as f32]).collect()
    }

    pub fn from_rows(rows: &[f32], fps: f64) -> Result<Self> {
        if rows.len() % KEYPOINT_WIDTH != 0 {
            return Err(Error::InvalidMotion(format!(
                "keypoint data length {} is not a multiple of {KEYPOINT_WIDTH}",
                rows.len()
            )));
        }
        let points: Vec<[f64; 2]> =
            rows.chunks_exact(2).map(|p| [p[0] as f64, p[1] as f64]).collect();
        let confidence = vec![1.0; points.len()];
        Ok(Keypoints2DSequence {
            fps,
            points,
            confidence,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySequence {
    pub fps: f64,
    pub positions: Vec<Vector3<f64>>,
}

impl TrajectorySequence {
    pub fn frames(&self) -> usize {
        self.positions.len()
    }
}
