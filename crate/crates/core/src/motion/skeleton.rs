//! Fixed 24-joint body template (SMPL joint ordering, y-up, +x to the body's left, +z forward).

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub const NUM_JOINTS: usize = 24;
pub const NUM_KEYPOINTS: usize = 17;
pub const NUM_FOOT_POINTS: usize = 4;

pub mod joint {
    pub const PELVIS: usize = 0;
    pub const L_HIP: usize = 1;
    pub const R_HIP: usize = 2;
    pub const SPINE1: usize = 3;
    pub const L_KNEE: usize = 4;
    pub const R_KNEE: usize = 5;
    pub const SPINE2: usize = 6;
    pub const L_ANKLE: usize = 7;
    pub const R_ANKLE: usize = 8;
    pub const SPINE3: usize = 9;
    pub const L_FOOT: usize = 10;
    pub const R_FOOT: usize = 11;
    pub const NECK: usize = 12;
    pub const L_COLLAR: usize = 13;
    pub const R_COLLAR: usize = 14;
    pub const HEAD: usize = 15;
    pub const L_SHOULDER: usize = 16;
    pub const R_SHOULDER: usize = 17;
    pub const L_ELBOW: usize = 18;
    pub const R_ELBOW: usize = 19;
    pub const L_WRIST: usize = 20;
    pub const R_WRIST: usize = 21;
    pub const L_HAND: usize = 22;
    pub const R_HAND: usize = 23;
}

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee", "spine2",
    "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot", "neck", "left_collar",
    "right_collar", "head", "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hand", "right_hand",
];

pub const COCO_NAMES: [&str; NUM_KEYPOINTS] = [
    "nose", "left_eye", "right_eye", "left_ear", "right_ear", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist", "left_hip",
    "right_hip", "left_knee", "right_knee", "left_ankle", "right_ankle",
];

const PARENTS: [Option<usize>; NUM_JOINTS] = [
    None,
    Some(0),
    Some(0),
    Some(0),
    Some(1),
    Some(2),
    Some(3),
    Some(4),
    Some(5),
    Some(6),
    Some(7),
    Some(8),
    Some(9),
    Some(9),
    Some(9),
    Some(12),
    Some(13),
    Some(14),
    Some(16),
    Some(17),
    Some(18),
    Some(19),
    Some(20),
    Some(21),
];

// Rest offsets of each joint from its parent, in meters, for a ~1.7 m adult in a T-pose.
const REST_OFFSETS: [[f64; 3]; NUM_JOINTS] = [
    [0.0, 0.0, 0.0],
    [0.06, -0.09, 0.0],
    [-0.06, -0.09, 0.0],
    [0.0, 0.11, -0.01],
    [0.0, -0.38, 0.0],
    [0.0, -0.38, 0.0],
    [0.0, 0.13, 0.0],
    [0.0, -0.40, -0.01],
    [0.0, -0.40, -0.01],
    [0.0, 0.05, 0.02],
    [0.0, -0.05, 0.12],
    [0.0, -0.05, 0.12],
    [0.0, 0.21, -0.02],
    [0.08, 0.11, -0.01],
    [-0.08, 0.11, -0.01],
    [0.0, 0.09, 0.04],
    [0.11, 0.03, 0.0],
    [-0.11, 0.03, 0.0],
    [0.26, 0.0, 0.0],
    [-0.26, 0.0, 0.0],
    [0.25, 0.0, 0.0],
    [-0.25, 0.0, 0.0],
    [0.08, 0.0, 0.0],
    [-0.08, 0.0, 0.0],
];

/// Height of the pelvis above the toes in the rest pose.
pub const REST_PELVIS_HEIGHT: f64 = 0.92;

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonTemplate {
    pub parent_index: [Option<usize>; NUM_JOINTS],
    pub rest_offsets: [Vector3<f64>; NUM_JOINTS],
    /// Left heel, left toe, right heel, right toe.
    pub foot_point_ids: [usize; NUM_FOOT_POINTS],
    /// Joint index for each COCO keypoint slot.
    pub coco_map: [usize; NUM_KEYPOINTS],
    /// Left/right counterpart of each joint (self for midline joints).
    pub mirror_map: [usize; NUM_JOINTS],
}

impl Default for SkeletonTemplate {
    fn default() -> Self {
        use joint::*;
        let rest_offsets = REST_OFFSETS.map(|o| Vector3::new(o[0], o[1], o[2]));
        let mut mirror_map = [0; NUM_JOINTS];
        for (j, m) in mirror_map.iter_mut().enumerate() {
            *m = j;
        }
        for (l, r) in [
            (L_HIP, R_HIP),
            (L_KNEE, R_KNEE),
            (L_ANKLE, R_ANKLE),
            (L_FOOT, R_FOOT),
            (L_COLLAR, R_COLLAR),
            (L_SHOULDER, R_SHOULDER),
            (L_ELBOW, R_ELBOW),
            (L_WRIST, R_WRIST),
            (L_HAND, R_HAND),
        ] {
            mirror_map[l] = r;
            mirror_map[r] = l;
        }
        SkeletonTemplate {
            parent_index: PARENTS,
            rest_offsets,
            foot_point_ids: [L_ANKLE, L_FOOT, R_ANKLE, R_FOOT],
            // Eyes and ears have no joint of their own; they collapse onto the head.
            coco_map: [
                HEAD, HEAD, HEAD, HEAD, HEAD, L_SHOULDER, R_SHOULDER, L_ELBOW, R_ELBOW, L_WRIST,
                R_WRIST, L_HIP, R_HIP, L_KNEE, R_KNEE, L_ANKLE, R_ANKLE,
            ],
            mirror_map,
        }
    }
}

impl SkeletonTemplate {
    /// Checks the tree, offset and index invariants. Parents must precede
    /// children so that a single forward pass visits the tree in order.
    pub fn validate(&self) -> Result<()> {
        if self.parent_index[0].is_some() {
            return Err(Error::InvalidConfig("joint 0 must be the root".into()));
        }
        for (j, p) in self.parent_index.iter().enumerate().skip(1) {
            match p {
                Some(p) if *p < j => {}
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "joint {j} needs a parent with a smaller index"
                    )))
                }
            }
        }
        if self.rest_offsets.iter().any(|o| !o.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidConfig("rest offsets must be finite".into()));
        }
        let f = &self.foot_point_ids;
        for a in 0..NUM_FOOT_POINTS {
            if f[a] >= NUM_JOINTS || (a + 1..NUM_FOOT_POINTS).any(|b| f[a] == f[b]) {
                return Err(Error::InvalidConfig("foot points must be distinct joints".into()));
            }
        }
        if self.coco_map.iter().any(|&j| j >= NUM_JOINTS) {
            return Err(Error::InvalidConfig("coco map points outside the skeleton".into()));
        }
        for (j, &m) in self.mirror_map.iter().enumerate() {
            if m >= NUM_JOINTS || self.mirror_map[m] != j {
                return Err(Error::InvalidConfig("mirror map must be an involution".into()));
            }
        }
        Ok(())
    }

    pub fn parent(&self, j: usize) -> Option<usize> {
        self.parent_index[j]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_template_is_valid() {
        SkeletonTemplate::default().validate().unwrap();
    }

    #[test]
    fn rest_offsets_are_left_right_symmetric() {
        let sk = SkeletonTemplate::default();
        for j in 0..NUM_JOINTS {
            let m = sk.mirror_map[j];
            let a = sk.rest_offsets[j];
            let b = sk.rest_offsets[m];
            assert_eq!(a.x, -b.x, "joint {j}");
            assert_eq!(a.y, b.y);
            assert_eq!(a.z, b.z);
            if m != j {
                assert_eq!(sk.parent_index[j].map(|p| sk.mirror_map[p]), sk.parent_index[m]);
            }
        }
    }

    #[test]
    fn cyclic_parent_rejected() {
        let mut sk = SkeletonTemplate::default();
        sk.parent_index[3] = Some(5);
        assert!(sk.validate().is_err());
        let mut sk = SkeletonTemplate::default();
        sk.foot_point_ids[1] = sk.foot_point_ids[0];
        assert!(sk.validate().is_err());
    }
}
