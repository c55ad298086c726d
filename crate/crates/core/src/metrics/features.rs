//! Handcrafted kinetic and geometric motion descriptors.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{forward_kinematics, joint, JointPositions, MotionSequence, SkeletonTemplate, NUM_JOINTS};
use crate::tensor_file::{Modality, TensorFile};

pub const KINETIC_DIM: usize = NUM_JOINTS * 3;
pub const GEOMETRIC_DIM: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Kinetic,
    Geometric,
}

impl FeatureKind {
    pub fn dim(self) -> usize {
        match self {
            FeatureKind::Kinetic => KINETIC_DIM,
            FeatureKind::Geometric => GEOMETRIC_DIM,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub kind: FeatureKind,
    pub vectors: Vec<Vec<f64>>,
}

impl FeatureSet {
    pub fn new(kind: FeatureKind, vectors: Vec<Vec<f64>>) -> Result<Self> {
        let dim = vectors.first().map(Vec::len).unwrap_or(kind.dim());
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::FeatureMismatch("ragged feature vectors".into()));
        }
        Ok(FeatureSet { kind, vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map(Vec::len).unwrap_or(0)
    }

    /// Loads externally computed per-sample features (one row per sample),
    /// e.g. embeddings from a separately trained classifier.
    pub fn from_tensor_file(kind: FeatureKind, file: &TensorFile) -> Result<Self> {
        if file.header.modality != Modality::Features || file.header.shape.len() != 2 {
            return Err(Error::FeatureMismatch("expected a 2-D features tensor".into()));
        }
        let width = file.header.shape[1];
        let vectors = file
            .data
            .chunks_exact(width.max(1))
            .map(|row| row.iter().map(|&v| v as f64).collect())
            .collect();
        FeatureSet::new(kind, vectors)
    }
}

/// Per joint, the time-mean of squared speed, squared acceleration and squared
/// jerk of its world position, using finite differences scaled by fps
/// (so doubling fps on identical samples multiplies the three blocks by 4, 16
/// and 64). Layout: 24 speed terms, then 24 acceleration terms, then 24 jerk terms.
pub fn kinetic_features(motion: &MotionSequence, skeleton: &SkeletonTemplate) -> Result<Vec<f64>> {
    if motion.frames() < 4 {
        return Err(Error::TooShort { need: 4, got: motion.frames() });
    }
    Ok(kinetic_from_positions(&forward_kinematics(motion, skeleton)?))
}

pub fn kinetic_from_positions(positions: &JointPositions) -> Vec<f64> {
    let frames = positions.frames();
    let fps = positions.fps;
    let mut out = vec![0.0; KINETIC_DIM];
    for j in 0..NUM_JOINTS {
        let track: Vec<Vector3<f64>> = (0..frames).map(|t| positions.at(t, j)).collect();
        let diff = |xs: &[Vector3<f64>]| -> Vec<Vector3<f64>> {
            xs.windows(2).map(|w| (w[1] - w[0]) * fps).collect()
        };
        let vel = diff(&track);
        let acc = diff(&vel);
        let jerk = diff(&acc);
        let mean_sq = |xs: &[Vector3<f64>]| xs.iter().map(|v| v.norm_squared()).sum::<f64>() / xs.len() as f64;
        out[j] = mean_sq(&vel);
        out[NUM_JOINTS + j] = mean_sq(&acc);
        out[2 * NUM_JOINTS + j] = mean_sq(&jerk);
    }
    out
}

/// Body-relative frame: lateral points from the right hip to the left hip in
/// the horizontal plane, up is world +y, forward = lateral x up.
struct BodyFrame {
    origin: Vector3<f64>,
    lateral: Vector3<f64>,
    forward: Vector3<f64>,
}

impl BodyFrame {
    fn new(frame: &[Vector3<f64>]) -> Self {
        let mut lateral = frame[joint::L_HIP] - frame[joint::R_HIP];
        lateral.y = 0.0;
        let lateral = if lateral.norm() > 1e-9 { lateral.normalize() } else { Vector3::x() };
        BodyFrame {
            origin: frame[joint::PELVIS],
            forward: lateral.cross(&Vector3::y()),
            lateral,
        }
    }

    fn lat(&self, p: Vector3<f64>) -> f64 {
        (p - self.origin).dot(&self.lateral)
    }

    fn fwd(&self, p: Vector3<f64>, from: Vector3<f64>) -> f64 {
        (p - from).dot(&self.forward)
    }
}

fn angle_at(a: Vector3<f64>, b: Vector3<f64>, c: Vector3<f64>) -> f64 {
    let u = a - b;
    let v = c - b;
    let denom = u.norm() * v.norm();
    if denom < 1e-12 {
        return std::f64::consts::PI;
    }
    (u.dot(&v) / denom).clamp(-1.0, 1.0).acos()
}

/// Names of the 16 per-side relations; feature `2k` is the left-side
/// version of relation `k`, feature `2k + 1` the right-side version.
pub const GEOMETRIC_RELATIONS: [&str; 16] = [
    "wrist_above_head",
    "wrist_above_shoulder",
    "elbow_above_shoulder",
    "wrist_near_hip",
    "wrist_in_front_of_chest",
    "wrist_across_midline",
    "knee_bent",
    "elbow_bent",
    "knee_raised",
    "foot_raised",
    "foot_forward",
    "foot_wide",
    "hand_near_head",
    "wrist_behind_back",
    "arm_extended",
    "foot_crossed",
];

struct Side {
    sign: f64,
    hip: usize,
    knee: usize,
    ankle: usize,
    shoulder: usize,
    elbow: usize,
    wrist: usize,
}

const SIDES: [Side; 2] = [
    Side {
        sign: 1.0,
        hip: joint::L_HIP,
        knee: joint::L_KNEE,
        ankle: joint::L_ANKLE,
        shoulder: joint::L_SHOULDER,
        elbow: joint::L_ELBOW,
        wrist: joint::L_WRIST,
    },
    Side {
        sign: -1.0,
        hip: joint::R_HIP,
        knee: joint::R_KNEE,
        ankle: joint::R_ANKLE,
        shoulder: joint::R_SHOULDER,
        elbow: joint::R_ELBOW,
        wrist: joint::R_WRIST,
    },
];

fn relations(frame: &[Vector3<f64>], side: &Side, ground: f64) -> [bool; 16] {
    let body = BodyFrame::new(frame);
    let w = frame[side.wrist];
    let e = frame[side.elbow];
    let sh = frame[side.shoulder];
    let hip = frame[side.hip];
    let knee = frame[side.knee];
    let ankle = frame[side.ankle];
    let head = frame[joint::HEAD];
    let chest = frame[joint::SPINE3];
    [
        w.y > head.y + 0.05,
        w.y > sh.y + 0.05,
        e.y > sh.y + 0.05,
        (w - hip).norm() < 0.25,
        body.fwd(w, chest) > 0.2,
        side.sign * body.lat(w) < -0.05,
        angle_at(hip, knee, ankle) < 150f64.to_radians(),
        angle_at(sh, e, w) < 120f64.to_radians(),
        knee.y > hip.y - 0.2,
        ankle.y - ground > 0.15,
        body.fwd(ankle, body.origin) > 0.2,
        side.sign * body.lat(ankle) > 0.3,
        (w - head).norm() < 0.3,
        body.fwd(w, chest) < -0.15,
        (w - sh).norm() > 0.45,
        side.sign * body.lat(ankle) < -0.02,
    ]
}

/// Frame-averaged truth values of 32 binary body relations (16 relations,
/// each evaluated for the left and the right side).
pub fn geometric_features(motion: &MotionSequence, skeleton: &SkeletonTemplate) -> Result<Vec<f64>> {
    if motion.frames() < 1 {
        return Err(Error::TooShort { need: 1, got: 0 });
    }
    Ok(geometric_from_positions(&forward_kinematics(motion, skeleton)?, skeleton))
}

pub fn geometric_from_positions(positions: &JointPositions, skeleton: &SkeletonTemplate) -> Vec<f64> {
    let frames = positions.frames();
    let ground = (0..frames)
        .flat_map(|t| skeleton.foot_point_ids.iter().map(move |&j| positions.at(t, j).y))
        .fold(0.0, f64::min);
    let mut out = vec![0.0; GEOMETRIC_DIM];
    for t in 0..frames {
        let frame = positions.frame(t);
        for (s, side) in SIDES.iter().enumerate() {
            for (k, hit) in relations(frame, side, ground).into_iter().enumerate() {
                if hit {
                    out[2 * k + s] += 1.0;
                }
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= frames as f64);
    out
}
