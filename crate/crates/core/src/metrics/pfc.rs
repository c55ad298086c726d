use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::motion::{forward_kinematics, joint, JointPositions, MotionSequence, SkeletonTemplate, NUM_JOINTS};

/// Physical foot contact score.
///
/// With `a_t` the root acceleration (upward component kept only when
/// positive, so free fall is not penalized) and `v^L_t`, `v^R_t` the mean
/// velocity of each foot's heel and toe,
///
/// ```text
/// PFC = sum_t |a_t| |v^L_t| |v^R_t| / (T * max_t |a_t|)
/// ```
///
/// A body may only accelerate while at least one foot is planted, so the
/// product vanishes whenever either foot is still. Returns 0 when the root
/// never accelerates.
pub fn pfc(motion: &MotionSequence, skeleton: &SkeletonTemplate) -> Result<f64> {
    let frames = motion.frames();
    if frames < 3 {
        return Err(Error::TooShort { need: 3, got: frames });
    }
    let positions = forward_kinematics(motion, skeleton)?;
    Ok(pfc_from_positions(&positions, skeleton.foot_point_ids)?.0)
}

/// PFC on precomputed joint positions. Also returns d(PFC)/d(positions),
/// with the maximum treated through its active frame and zero-norm terms
/// contributing a zero subgradient.
pub fn pfc_from_positions(
    positions: &JointPositions,
    feet: [usize; 4],
) -> Result<(f64, Vec<Vector3<f64>>)> {
    let frames = positions.frames();
    if frames < 3 {
        return Err(Error::TooShort { need: 3, got: frames });
    }
    let fps = positions.fps;
    let idx = |t: usize, j: usize| t * NUM_JOINTS + j;
    let root = joint::PELVIS;

    struct Term {
        t: usize,
        accel: Vector3<f64>,
        accel_norm: f64,
        left: Vector3<f64>,
        right: Vector3<f64>,
    }
    let foot_velocity = |t: usize, a: usize, b: usize| {
        let va = positions.at(t + 1, feet[a]) - positions.at(t, feet[a]);
        let vb = positions.at(t + 1, feet[b]) - positions.at(t, feet[b]);
        (va + vb) * (0.5 * fps)
    };
    let terms: Vec<Term> = (1..frames - 1)
        .map(|t| {
            let mut accel = (positions.at(t + 1, root) - 2.0 * positions.at(t, root)
                + positions.at(t - 1, root))
                * (fps * fps);
            accel.y = accel.y.max(0.0);
            Term {
                t,
                accel_norm: accel.norm(),
                accel,
                left: foot_velocity(t, 0, 1),
                right: foot_velocity(t, 2, 3),
            }
        })
        .collect();

    let mut grad = vec![Vector3::zeros(); positions.data.len()];
    let (argmax, max_accel) = terms
        .iter()
        .enumerate()
        .fold((0, 0.0f64), |(bi, bv), (i, term)| if term.accel_norm > bv { (i, term.accel_norm) } else { (bi, bv) });
    if max_accel == 0.0 {
        return Ok((0.0, grad));
    }
    let norm = frames as f64 * max_accel;

    let unit = |v: &Vector3<f64>| {
        let n = v.norm();
        if n > 0.0 {
            v / n
        } else {
            Vector3::zeros()
        }
    };
    // d|a_adj| / d(raw accel): the clamped upward component passes no gradient.
    let accel_dir = |term: &Term| {
        let mut u = unit(&term.accel);
        if term.accel.y <= 0.0 {
            u.y = 0.0;
        }
        u
    };
    let push_accel = |grad: &mut Vec<Vector3<f64>>, t: usize, g: Vector3<f64>| {
        let s = fps * fps;
        grad[idx(t + 1, root)] += g * s;
        grad[idx(t, root)] -= g * (2.0 * s);
        grad[idx(t - 1, root)] += g * s;
    };
    let push_foot = |grad: &mut Vec<Vector3<f64>>, t: usize, a: usize, b: usize, g: Vector3<f64>| {
        let g = g * (0.5 * fps);
        for k in [a, b] {
            grad[idx(t + 1, feet[k])] += g;
            grad[idx(t, feet[k])] -= g;
        }
    };

    let mut total = 0.0;
    for term in &terms {
        let vl = term.left.norm();
        let vr = term.right.norm();
        total += term.accel_norm * vl * vr;
        let w = 1.0 / norm;
        push_accel(&mut grad, term.t, accel_dir(term) * (vl * vr * w));
        push_foot(&mut grad, term.t, 0, 1, unit(&term.left) * (term.accel_norm * vr * w));
        push_foot(&mut grad, term.t, 2, 3, unit(&term.right) * (term.accel_norm * vl * w));
    }
    let value = total / norm;
    let active = &terms[argmax];
    push_accel(&mut grad, active.t, accel_dir(active) * (-value / max_accel));
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{axis_angle, Rot6d};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gliding(frames: usize) -> MotionSequence {
        let mut m = MotionSequence::rest(frames, 10.0, Vector3::new(0.0, 0.92, 0.0));
        for t in 0..frames {
            let s = t as f64 / 10.0;
            m.root_translation[t] = Vector3::new(0.3 * s * s, 0.92 + 0.05 * (3.0 * s).sin(), 0.1 * s);
            let swing = 0.3 * (2.0 * s).sin();
            *m.rotation_mut(t, joint::L_HIP) = Rot6d::from_matrix(&axis_angle(&Vector3::x(), swing)).unwrap();
        }
        m
    }

    // Direct restatement of the formula, sharing nothing with the implementation.
    fn brute_force(pos: &JointPositions, feet: [usize; 4]) -> f64 {
        let n = pos.frames();
        let fps = pos.fps;
        let mut accels = Vec::new();
        let mut products = Vec::new();
        for t in 1..n - 1 {
            let r = |k: usize| pos.at(k, 0);
            let mut a = (r(t + 1) - r(t) * 2.0 + r(t - 1)) * fps * fps;
            if a.y < 0.0 {
                a.y = 0.0;
            }
            let vel = |k: usize| (pos.at(t + 1, feet[k]) - pos.at(t, feet[k])) * fps;
            let vl = ((vel(0) + vel(1)) / 2.0).norm();
            let vr = ((vel(2) + vel(3)) / 2.0).norm();
            accels.push(a.norm());
            products.push(vl * vr);
        }
        let max = accels.iter().cloned().fold(0.0, f64::max);
        if max == 0.0 {
            return 0.0;
        }
        accels.iter().zip(&products).map(|(a, p)| a * p).sum::<f64>() / (n as f64 * max)
    }

    #[test]
    fn stationary_motion_scores_zero() {
        let sk = SkeletonTemplate::default();
        let m = MotionSequence::rest(20, 10.0, Vector3::new(0.0, 0.92, 0.0));
        assert_eq!(pfc(&m, &sk).unwrap(), 0.0);
    }

    #[test]
    fn pinned_left_foot_annihilates_score() {
        let sk = SkeletonTemplate::default();
        let m = gliding(30);
        let mut pos = forward_kinematics(&m, &sk).unwrap();
        for t in 0..30 {
            for &j in &sk.foot_point_ids[..2] {
                pos.data[t * NUM_JOINTS + j] = pos.at(0, j);
            }
        }
        assert_eq!(pfc_from_positions(&pos, sk.foot_point_ids).unwrap().0, 0.0);
    }

    #[test]
    fn glide_matches_brute_force() {
        let sk = SkeletonTemplate::default();
        let m = gliding(40);
        let pos = forward_kinematics(&m, &sk).unwrap();
        let got = pfc(&m, &sk).unwrap();
        assert!(got > 0.0);
        assert!((got - brute_force(&pos, sk.foot_point_ids)).abs() < 1e-12);
    }

    #[test]
    fn too_short_is_an_error() {
        let sk = SkeletonTemplate::default();
        let m = MotionSequence::rest(2, 10.0, Vector3::zeros());
        assert!(matches!(pfc(&m, &sk), Err(Error::TooShort { need: 3, got: 2 })));
    }

    #[test]
    fn horizontal_translation_invariant() {
        let sk = SkeletonTemplate::default();
        let m = gliding(30);
        let mut moved = m.clone();
        moved.root_translation.iter_mut().for_each(|p| {
            p.x += 4.0;
            p.z -= 2.0;
        });
        assert!((pfc(&m, &sk).unwrap() - pfc(&moved, &sk).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let sk = SkeletonTemplate::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pos = forward_kinematics(&gliding(12), &sk).unwrap();
        let mut pos = pos;
        for p in pos.data.iter_mut() {
            *p += Vector3::new(rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02));
        }
        let feet = sk.foot_point_ids;
        let (_, grad) = pfc_from_positions(&pos, feet).unwrap();
        let h = 1e-7;
        let mut checked = 0;
        for t in 0..12 {
            for j in [0, feet[0], feet[1], feet[2], feet[3], 5] {
                for k in 0..3 {
                    let i = t * NUM_JOINTS + j;
                    let mut a = pos.clone();
                    a.data[i][k] += h;
                    let mut b = pos.clone();
                    b.data[i][k] -= h;
                    let fd = (brute_force(&a, feet) - brute_force(&b, feet)) / (2.0 * h);
                    assert!((fd - grad[i][k]).abs() < 1e-5 * (1.0 + fd.abs()), "t {t} j {j} k {k}: {fd} vs {}", grad[i][k]);
                    checked += 1;
                }
            }
        }
        assert!(checked > 0);
    }
}
