use nalgebra::{Matrix3, Vector3};

use super::rotation::{rot6d_matrix_vjp, rot6d_to_matrix};
use super::skeleton::{SkeletonTemplate, NUM_FOOT_POINTS, NUM_JOINTS, NUM_KEYPOINTS};
use super::{Keypoints2DSequence, MotionSequence};
use crate::error::{Error, Result};

/// World-space joint positions, frame-major (`frames * NUM_JOINTS`).
#[derive(Debug, Clone, PartialEq)]
pub struct JointPositions {
    pub fps: f64,
    pub data: Vec<Vector3<f64>>,
}

impl JointPositions {
    pub fn frames(&self) -> usize {
        self.data.len() / NUM_JOINTS
    }

    pub fn at(&self, t: usize, j: usize) -> Vector3<f64> {
        self.data[t * NUM_JOINTS + j]
    }

    pub fn frame(&self, t: usize) -> &[Vector3<f64>] {
        &self.data[t * NUM_JOINTS..(t + 1) * NUM_JOINTS]
    }
}

/// Per-frame local and world rotation matrices kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct FkCache {
    local: Vec<Matrix3<f64>>,
    world: Vec<Matrix3<f64>>,
}

/// Joint world positions. The root sits at the root translation; every other
/// joint is its parent's position plus the parent's world rotation applied to
/// the rest offset.
pub fn forward_kinematics(motion: &MotionSequence, skeleton: &SkeletonTemplate) -> Result<JointPositions> {
    forward_kinematics_cached(motion, skeleton).map(|(p, _)| p)
}

pub(crate) fn forward_kinematics_cached(
    motion: &MotionSequence,
    skeleton: &SkeletonTemplate,
) -> Result<(JointPositions, FkCache)> {
    let frames = motion.frames();
    let mut data = Vec::with_capacity(frames * NUM_JOINTS);
    let mut local = Vec::with_capacity(frames * NUM_JOINTS);
    let mut world: Vec<Matrix3<f64>> = Vec::with_capacity(frames * NUM_JOINTS);
    for t in 0..frames {
        let base = t * NUM_JOINTS;
        for j in 0..NUM_JOINTS {
            let r = rot6d_to_matrix(motion.rotation(t, j))?;
            local.push(r);
            match skeleton.parent_index[j] {
                None => {
                    world.push(r);
                    data.push(motion.root_translation[t]);
                }
                Some(p) => {
                    let wp = world[base + p];
                    data.push(data[base + p] + wp * skeleton.rest_offsets[j]);
                    world.push(wp * r);
                }
            }
        }
    }
    Ok((JointPositions { fps: motion.fps, data }, FkCache { local, world }))
}

/// Reverse-mode pass through [`forward_kinematics`]: given dL/dpositions,
/// returns dL/d(6D rotations) and dL/d(root translation).
pub fn forward_kinematics_vjp(
    motion: &MotionSequence,
    skeleton: &SkeletonTemplate,
    cache: &FkCache,
    grad_positions: &[Vector3<f64>],
) -> Result<(Vec<[f64; 6]>, Vec<Vector3<f64>>)> {
    let frames = motion.frames();
    let mut grad_rot = vec![[0.0; 6]; frames * NUM_JOINTS];
    let mut grad_root = vec![Vector3::zeros(); frames];
    let mut g_pos = [Vector3::<f64>::zeros(); NUM_JOINTS];
    let mut g_world = [Matrix3::<f64>::zeros(); NUM_JOINTS];
    for t in 0..frames {
        let base = t * NUM_JOINTS;
        g_pos.copy_from_slice(&grad_positions[base..base + NUM_JOINTS]);
        g_world.iter_mut().for_each(|g| *g = Matrix3::zeros());
        for j in (0..NUM_JOINTS).rev() {
            let g_local = match skeleton.parent_index[j] {
                None => {
                    grad_root[t] = g_pos[j];
                    g_world[j]
                }
                Some(p) => {
                    let wp = cache.world[base + p];
                    let gp = g_pos[j];
                    g_pos[p] += gp;
                    g_world[p] += gp * skeleton.rest_offsets[j].transpose();
                    g_world[p] += g_world[j] * cache.local[base + j].transpose();
                    wp.transpose() * g_world[j]
                }
            };
            grad_rot[base + j] = rot6d_matrix_vjp(motion.rotation(t, j), &g_local)?;
        }
    }
    Ok((grad_rot, grad_root))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContactThresholds {
    /// Foot-point speed below which the point may be in contact, m/s.
    pub velocity: f64,
    /// Height above the ground plane below which the point may be in contact, m.
    pub height: f64,
}

impl Default for ContactThresholds {
    fn default() -> Self {
        ContactThresholds {
            velocity: 0.15,
            height: 0.08,
        }
    }
}

/// Binary heel/toe contact labels. The ground plane is the lowest foot-point
/// height over the sequence, capped at y = 0 so that a body floating above the
/// world floor is never grounded. The last frame repeats the previous label.
pub fn derive_contact_labels(
    positions: &JointPositions,
    skeleton: &SkeletonTemplate,
    thresholds: ContactThresholds,
) -> Result<Vec<[bool; NUM_FOOT_POINTS]>> {
    let frames = positions.frames();
    if frames < 2 {
        return Err(Error::TooShort { need: 2, got: frames });
    }
    let v_thresh = thresholds.velocity.max(0.0);
    let h_thresh = thresholds.height.max(0.0);
    let feet = skeleton.foot_point_ids;
    let ground = (0..frames)
        .flat_map(|t| feet.iter().map(move |&j| positions.at(t, j).y))
        .fold(0.0, f64::min);
    let mut labels = Vec::with_capacity(frames);
    for t in 0..frames - 1 {
        labels.push(std::array::from_fn(|k| {
            let p = positions.at(t, feet[k]);
            let speed = (positions.at(t + 1, feet[k]) - p).norm() * positions.fps;
            speed < v_thresh && p.y - ground < h_thresh
        }));
    }
    labels.push(labels[frames - 2]);
    Ok(labels)
}

/// Orthographic projection onto the image plane: `(x, y) = scale * (X, -Y) + offset`.
pub fn project_keypoints(
    positions: &JointPositions,
    skeleton: &SkeletonTemplate,
    scale: f64,
    offset: [f64; 2],
) -> Keypoints2DSequence {
    let frames = positions.frames();
    let mut points = Vec::with_capacity(frames * NUM_KEYPOINTS);
    for t in 0..frames {
        for &j in &skeleton.coco_map {
            let p = positions.at(t, j);
            points.push([scale * p.x + offset[0], -scale * p.y + offset[1]]);
        }
    }
    Keypoints2DSequence {
        fps: positions.fps,
        confidence: vec![1.0; points.len()],
        points,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{axis_angle, joint, Rot6d};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rest_positions(sk: &SkeletonTemplate) -> Vec<Vector3<f64>> {
        let mut out: Vec<Vector3<f64>> = Vec::new();
        for j in 0..NUM_JOINTS {
            out.push(match sk.parent_index[j] {
                None => Vector3::zeros(),
                Some(p) => out[p] + sk.rest_offsets[j],
            });
        }
        out
    }

    fn random_motion(rng: &mut ChaCha8Rng, frames: usize) -> MotionSequence {
        let mut m = MotionSequence::rest(frames, 10.0, Vector3::zeros());
        for r in m.rotations.iter_mut() {
            let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0);
            *r = Rot6d::from_matrix(&axis_angle(&axis, rng.random_range(-1.0..1.0))).unwrap();
        }
        for p in m.root_translation.iter_mut() {
            *p = Vector3::new(rng.random_range(-1.0..1.0), 0.9, rng.random_range(-1.0..1.0));
        }
        m
    }

    #[test]
    fn identity_pose_accumulates_rest_offsets() {
        let sk = SkeletonTemplate::default();
        let expected = rest_positions(&sk);
        let pos = forward_kinematics(&MotionSequence::rest(2, 10.0, Vector3::zeros()), &sk).unwrap();
        for t in 0..2 {
            for j in 0..NUM_JOINTS {
                assert!((pos.at(t, j) - expected[j]).norm() < 1e-12);
            }
        }
        let shift = Vector3::new(1.0, 2.0, 3.0);
        let pos = forward_kinematics(&MotionSequence::rest(3, 10.0, shift), &sk).unwrap();
        for j in 0..NUM_JOINTS {
            assert!((pos.at(2, j) - expected[j] - shift).norm() < 1e-12);
        }
        let toe = expected[joint::L_FOOT].y;
        assert!((toe + super::super::REST_PELVIS_HEIGHT).abs() < 1e-12);
    }

    #[test]
    fn two_link_chain_by_hand() {
        // Chain pelvis -> left hip -> left knee. Rotating the hip 90 degrees about z
        // swings the knee offset (0,-0.38,0) to (0.38,0,0).
        let sk = SkeletonTemplate::default();
        let mut m = MotionSequence::rest(1, 10.0, Vector3::zeros());
        let rz = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        *m.rotation_mut(0, joint::L_HIP) = Rot6d::from_matrix(&rz).unwrap();
        let pos = forward_kinematics(&m, &sk).unwrap();
        let hip = Vector3::new(0.06, -0.09, 0.0);
        assert!((pos.at(0, joint::L_HIP) - hip).norm() < 1e-12);
        assert!((pos.at(0, joint::L_KNEE) - (hip + Vector3::new(0.38, 0.0, 0.0))).norm() < 1e-12);
    }

    #[test]
    fn root_rotation_is_equivariant() {
        let sk = SkeletonTemplate::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_motion(&mut rng, 4);
        let base = forward_kinematics(&m, &sk).unwrap();
        let rot = axis_angle(&Vector3::new(0.3, 1.0, -0.2), 1.1);
        let mut turned = m.clone();
        for t in 0..4 {
            let r0 = m.rotation(t, 0).to_matrix().unwrap();
            *turned.rotation_mut(t, 0) = Rot6d::from_matrix(&(rot * r0)).unwrap();
        }
        let out = forward_kinematics(&turned, &sk).unwrap();
        for t in 0..4 {
            let root = m.root_translation[t];
            for j in 0..NUM_JOINTS {
                let expect = root + rot * (base.at(t, j) - root);
                assert!((out.at(t, j) - expect).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn constant_pose_gives_constant_positions() {
        let sk = SkeletonTemplate::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let one = random_motion(&mut rng, 1);
        let mut m = one.clone();
        for _ in 0..5 {
            m.rotations.extend_from_slice(&one.rotations);
            m.root_translation.push(one.root_translation[0]);
            m.contacts.push(one.contacts[0]);
        }
        let pos = forward_kinematics(&m, &sk).unwrap();
        for t in 1..6 {
            assert_eq!(pos.frame(t), pos.frame(0));
        }
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let sk = SkeletonTemplate::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = random_motion(&mut rng, 2);
        let weights: Vec<Vector3<f64>> = (0..2 * NUM_JOINTS)
            .map(|_| Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let objective = |m: &MotionSequence| -> f64 {
            let p = forward_kinematics(m, &sk).unwrap();
            p.data.iter().zip(&weights).map(|(a, w)| a.dot(w)).sum()
        };
        let (_, cache) = forward_kinematics_cached(&m, &sk).unwrap();
        let (g_rot, g_root) = forward_kinematics_vjp(&m, &sk, &cache, &weights).unwrap();
        let h = 1e-6;
        for idx in [0usize, 1, 4, 9, 16, 18, 24 + 7, 24 + 20] {
            for k in 0..6 {
                let mut a = m.clone();
                a.rotations[idx].0[k] += h;
                let mut b = m.clone();
                b.rotations[idx].0[k] -= h;
                let fd = (objective(&a) - objective(&b)) / (2.0 * h);
                assert!((fd - g_rot[idx][k]).abs() < 1e-6 * (1.0 + fd.abs()), "idx {idx} k {k}: {fd} vs {}", g_rot[idx][k]);
            }
        }
        for t in 0..2 {
            for k in 0..3 {
                let mut a = m.clone();
                a.root_translation[t][k] += h;
                let mut b = m.clone();
                b.root_translation[t][k] -= h;
                let fd = (objective(&a) - objective(&b)) / (2.0 * h);
                assert!((fd - g_root[t][k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn contacts_for_grounded_and_raised_feet() {
        let sk = SkeletonTemplate::default();
        let th = ContactThresholds { velocity: 0.15, height: 0.08 };
        let still = forward_kinematics(&MotionSequence::rest(5, 10.0, Vector3::new(0.0, 0.92, 0.0)), &sk).unwrap();
        let labels = derive_contact_labels(&still, &sk, th).unwrap();
        assert!(labels.iter().all(|l| l.iter().all(|&c| c)));

        let mut raised = still.clone();
        for t in 0..5 {
            for &j in &sk.foot_point_ids {
                raised.data[t * NUM_JOINTS + j].y = 1.0;
            }
        }
        let labels = derive_contact_labels(&raised, &sk, th).unwrap();
        assert!(labels.iter().all(|l| l.iter().all(|&c| !c)));
        assert_eq!(labels, labels_with_ground(&raised, &sk, th, 0.0));

        // a floor below y = 0 is found from the lowest foot point
        let sunk = forward_kinematics(&MotionSequence::rest(5, 10.0, Vector3::new(0.0, 0.5, 0.0)), &sk).unwrap();
        let labels = derive_contact_labels(&sunk, &sk, th).unwrap();
        assert!(labels.iter().all(|l| l.iter().all(|&c| c)));
        assert!(derive_contact_labels(&JointPositions { fps: 10.0, data: sunk.data[..NUM_JOINTS].to_vec() }, &sk, th).is_err());
    }

    // Brute-force restatement of the rule with a given ground height.
    fn labels_with_ground(
        pos: &JointPositions,
        sk: &SkeletonTemplate,
        th: ContactThresholds,
        ground: f64,
    ) -> Vec<[bool; 4]> {
        let n = pos.frames();
        let mut out = vec![[false; 4]; n];
        for t in 0..n {
            let src = if t + 1 < n { t } else { t - 1 };
            for k in 0..4 {
                let j = sk.foot_point_ids[k];
                let v = ((pos.at(src + 1, j) - pos.at(src, j)).norm()) * pos.fps;
                out[t][k] = v < th.velocity && pos.at(src, j).y - ground < th.height;
            }
        }
        out
    }

    #[test]
    fn stepping_motion_matches_brute_force_rule() {
        let sk = SkeletonTemplate::default();
        let frames = 40;
        let mut m = MotionSequence::rest(frames, 10.0, Vector3::new(0.0, 0.92, 0.0));
        for t in 0..frames {
            let phase = t as f64 * 0.45;
            let lift = phase.sin().max(0.0) * 0.8;
            let other = (-phase.sin()).max(0.0) * 0.8;
            *m.rotation_mut(t, joint::L_HIP) = Rot6d::from_matrix(&axis_angle(&Vector3::x(), -lift)).unwrap();
            *m.rotation_mut(t, joint::L_KNEE) = Rot6d::from_matrix(&axis_angle(&Vector3::x(), lift)).unwrap();
            *m.rotation_mut(t, joint::R_HIP) = Rot6d::from_matrix(&axis_angle(&Vector3::x(), -other)).unwrap();
            *m.rotation_mut(t, joint::R_KNEE) = Rot6d::from_matrix(&axis_angle(&Vector3::x(), other)).unwrap();
            m.root_translation[t].z = 0.005 * t as f64;
        }
        let pos = forward_kinematics(&m, &sk).unwrap();
        let th = ContactThresholds::default();
        let labels = derive_contact_labels(&pos, &sk, th).unwrap();
        let ground = (0..frames)
            .flat_map(|t| sk.foot_point_ids.iter().map(move |&j| (t, j)))
            .map(|(t, j)| pos.at(t, j).y)
            .fold(0.0, f64::min);
        assert_eq!(labels, labels_with_ground(&pos, &sk, th, ground));
        assert!(labels.iter().any(|l| l.iter().any(|&c| c)));
        assert!(labels.iter().any(|l| l.iter().any(|&c| !c)));

        // idempotent and invariant to horizontal translation
        assert_eq!(labels, derive_contact_labels(&pos, &sk, th).unwrap());
        let mut moved = pos.clone();
        moved.data.iter_mut().for_each(|p| {
            p.x += 3.5;
            p.z -= 1.25;
        });
        assert_eq!(labels, derive_contact_labels(&moved, &sk, th).unwrap());
    }

    #[test]
    fn projection_is_affine() {
        let sk = SkeletonTemplate::default();
        let rest = rest_positions(&sk);
        let pos = forward_kinematics(&MotionSequence::rest(1, 10.0, Vector3::zeros()), &sk).unwrap();
        let unit = project_keypoints(&pos, &sk, 1.0, [0.0, 0.0]);
        for (k, &j) in sk.coco_map.iter().enumerate() {
            assert!((unit.point(0, k)[0] - rest[j].x).abs() < 1e-12);
            assert!((unit.point(0, k)[1] + rest[j].y).abs() < 1e-12);
        }
        let img = project_keypoints(&pos, &sk, 100.0, [320.0, 240.0]);
        for k in 0..NUM_KEYPOINTS {
            let a = unit.point(0, k);
            let b = img.point(0, k);
            assert!((b[0] - (100.0 * a[0] + 320.0)).abs() < 1e-9);
            assert!((b[1] - (100.0 * a[1] + 240.0)).abs() < 1e-9);
        }
        assert!(img.confidence.iter().all(|&c| c == 1.0));

        let delta = Vector3::new(0.5, -0.25, 2.0);
        let moved = forward_kinematics(&MotionSequence::rest(1, 10.0, delta), &sk).unwrap();
        let shifted = project_keypoints(&moved, &sk, 100.0, [320.0, 240.0]);
        for k in 0..NUM_KEYPOINTS {
            let a = img.point(0, k);
            let b = shifted.point(0, k);
            assert!((b[0] - a[0] - 100.0 * delta.x).abs() < 1e-9);
            assert!((b[1] - a[1] + 100.0 * delta.y).abs() < 1e-9);
        }
    }
}
