use crate::error::{Error, Result};
use crate::motion::{forward_kinematics, JointPositions, MotionSequence, SkeletonTemplate, NUM_JOINTS};

/// Mean joint speed per frame (m/s). Interior frames use central differences,
/// the two ends one-sided ones.
pub fn mean_joint_speed(positions: &JointPositions) -> Vec<f64> {
    let n = positions.frames();
    let fps = positions.fps;
    (0..n)
        .map(|t| {
            let (a, b, span) = match (t, n) {
                (_, 0 | 1) => return 0.0,
                (0, _) => (0, 1, 1.0),
                (t, n) if t == n - 1 => (t - 1, t, 1.0),
                (t, _) => (t - 1, t + 1, 2.0),
            };
            (0..NUM_JOINTS)
                .map(|j| (positions.at(b, j) - positions.at(a, j)).norm())
                .sum::<f64>()
                * fps
                / (span * NUM_JOINTS as f64)
        })
        .collect()
}

/// Frames whose mean joint speed is strictly below both neighbours.
pub fn dance_beats(positions: &JointPositions) -> Vec<usize> {
    let speed = mean_joint_speed(positions);
    (1..speed.len().saturating_sub(1))
        .filter(|&t| speed[t] < speed[t - 1] && speed[t] < speed[t + 1])
        .collect()
}

/// `mean over music beats b of exp(-min_d (b - d)^2 / (2 sigma^2))`, with dance
/// beats `d` at kinematic speed minima. Zero when the motion has no dance beats.
pub fn beat_align_score_from_beats(music_beats: &[usize], dance: &[usize], sigma: f64) -> Result<f64> {
    if music_beats.is_empty() {
        return Err(Error::NoMusicBeats);
    }
    if dance.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = music_beats
        .iter()
        .map(|&b| {
            let nearest = dance
                .iter()
                .map(|&d| (b as f64 - d as f64).powi(2))
                .fold(f64::INFINITY, f64::min);
            (-nearest / (2.0 * sigma * sigma)).exp()
        })
        .sum();
    Ok(total / music_beats.len() as f64)
}

pub fn beat_align_score(
    motion: &MotionSequence,
    skeleton: &SkeletonTemplate,
    music_beats: &[usize],
    sigma: f64,
) -> Result<f64> {
    if music_beats.is_empty() {
        return Err(Error::NoMusicBeats);
    }
    if motion.frames() < 3 {
        return Err(Error::TooShort { need: 3, got: motion.frames() });
    }
    let positions = forward_kinematics(motion, skeleton)?;
    beat_align_score_from_beats(music_beats, &dance_beats(&positions), sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::{axis_angle, joint, Rot6d};
    use nalgebra::Vector3;

    // Elbow swings with zero velocity exactly at multiples of `period`.
    fn pulsing(frames: usize, period: usize, shift: usize) -> MotionSequence {
        let mut m = MotionSequence::rest(frames, 10.0, Vector3::new(0.0, 0.92, 0.0));
        for t in 0..frames {
            let phase = std::f64::consts::PI * (t as f64 - shift as f64) / period as f64;
            let angle = 1.2 * phase.sin().powi(2);
            *m.rotation_mut(t, joint::L_ELBOW) = Rot6d::from_matrix(&axis_angle(&Vector3::y(), angle)).unwrap();
        }
        m
    }

    #[test]
    fn coincident_beats_score_one() {
        let sk = SkeletonTemplate::default();
        let m = pulsing(40, 8, 0);
        let pos = forward_kinematics(&m, &sk).unwrap();
        let dance = dance_beats(&pos);
        assert!(dance.contains(&8) && dance.contains(&16));
        let music = vec![8, 16, 24, 32];
        assert_eq!(beat_align_score(&m, &sk, &music, 3.0).unwrap(), 1.0);
    }

    #[test]
    fn single_beat_offset_by_sigma() {
        let s = beat_align_score_from_beats(&[10], &[13], 3.0).unwrap();
        assert!((s - (-0.5f64).exp()).abs() < 1e-12);
        assert!((s - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn monotone_speed_has_no_dance_beats() {
        let sk = SkeletonTemplate::default();
        let mut m = MotionSequence::rest(20, 10.0, Vector3::zeros());
        for t in 0..20 {
            let s = t as f64 * 0.1;
            m.root_translation[t] = Vector3::new(s * s, 0.92, 0.0);
        }
        assert_eq!(beat_align_score(&m, &sk, &[5, 10], 3.0).unwrap(), 0.0);
        assert!(matches!(beat_align_score(&m, &sk, &[], 3.0), Err(Error::NoMusicBeats)));
    }

    #[test]
    fn distant_extra_dance_beats_do_not_matter() {
        let base = beat_align_score_from_beats(&[10, 20], &[11, 19], 2.0).unwrap();
        let extra = beat_align_score_from_beats(&[10, 20], &[11, 19, 60, 90], 2.0).unwrap();
        assert!((base - extra).abs() < 1e-7);
    }

    #[test]
    fn score_decreases_with_distance() {
        let mut last = 1.1;
        for off in 0..8 {
            let s = beat_align_score_from_beats(&[20], &[20 + off], 3.0).unwrap();
            assert!(s < last);
            last = s;
        }
    }
}
