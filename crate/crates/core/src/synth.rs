//! Procedural dance sequences with beat-locked motion, music and text.
//!
//! Every animated joint follows `A * w * sin^2(pi * m * t / P + phi)` with
//! `2m` an integer and `phi` in `{0, pi/2}`, so each joint is symmetric about
//! every beat `t = nP`: central-difference speeds vanish on beat frames.

use std::f64::consts::{FRAC_PI_2, PI};
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{DanceSample, DatasetManifest, Genre, MusicFeatures};
use crate::error::{Error, Result};
use crate::motion::{
    axis_angle, derive_contact_labels, forward_kinematics, joint, project_keypoints, ContactThresholds,
    MotionSequence, Rot6d, SkeletonTemplate, REST_PELVIS_HEIGHT,
};
use crate::pipeline::build_manifest;

/// Width of the compact music descriptor.
pub const MUSIC_DIM: usize = 35;
/// Width of the wide descriptor used for shape checks.
pub const WIDE_MUSIC_DIM: usize = 4800;
pub const TEXT_DIM: usize = 512;
pub const KEYPOINT_SCALE: f64 = 100.0;
pub const KEYPOINT_OFFSET: [f64; 2] = [320.0, 240.0];

const HARMONICS: usize = 9;
// channel layout of the compact descriptor
const CH_ENVELOPE: usize = 0;
const CH_GENRE: usize = 1;
const CH_HARMONIC: usize = CH_GENRE + 14;
const CH_PHASE: usize = CH_HARMONIC + 2 * HARMONICS;
const CH_BEAT: usize = CH_PHASE + 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenreStyle {
    pub genre: Genre,
    /// Movement frequency; snapped to the nearest half-multiple of the beat rate.
    pub base_freq_hz: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_sequences: usize,
    pub duration_s: f64,
    pub fps: f64,
    /// Sequences cycle through these styles.
    pub genres: Vec<GenreStyle>,
    pub beat_period_s: f64,
    pub seed: u64,
    pub music_dim: usize,
    pub text_dim: usize,
    /// Std of Gaussian noise on 6D rotation coordinates and root translation.
    pub noise_std: f64,
    /// The first this-many sequences get a one-second keypoint glitch mid-sequence.
    pub glitch_sequences: usize,
    pub train_ratio: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_sequences: 8,
            duration_s: 20.0,
            fps: 10.0,
            genres: vec![
                GenreStyle {
                    genre: Genre::Street,
                    base_freq_hz: 1.25,
                    amplitude: 1.0,
                },
                GenreStyle {
                    genre: Genre::Ballet,
                    base_freq_hz: 0.625,
                    amplitude: 0.8,
                },
            ],
            beat_period_s: 0.8,
            seed: 0,
            music_dim: MUSIC_DIM,
            text_dim: TEXT_DIM,
            noise_std: 0.0,
            glitch_sequences: 0,
            train_ratio: 0.8,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.fps > 0.0) {
            return bad(format!("fps {} must be positive", self.fps));
        }
        if !(self.duration_s >= 12.0) {
            return bad(format!("duration {} s must be at least 12 s", self.duration_s));
        }
        if !(self.beat_period_s > 0.0) {
            return bad(format!("beat period {} must be positive", self.beat_period_s));
        }
        if self.genres.is_empty() {
            return bad("at least one genre style is required".into());
        }
        if self.genres.iter().any(|g| !(g.base_freq_hz > 0.0) || !(g.amplitude >= 0.0)) {
            return bad("genre frequencies must be positive and amplitudes non-negative".into());
        }
        if self.music_dim < MUSIC_DIM {
            return bad(format!("music_dim {} below the {MUSIC_DIM} basis channels", self.music_dim));
        }
        if self.text_dim < 1 || !(self.noise_std >= 0.0) {
            return bad("text_dim must be >= 1 and noise_std >= 0".into());
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        (self.duration_s * self.fps).round() as usize
    }
}

/// Beat multiplier `m` for a frequency: `2m` is a positive integer.
fn beat_multiple(freq_hz: f64, beat_period_s: f64) -> f64 {
    ((2.0 * freq_hz * beat_period_s).round()).max(1.0) / 2.0
}

/// Interior frames closest to the beat times `n P`, `n >= 1`.
pub fn beat_frames(frames: usize, fps: f64, beat_period_s: f64) -> Vec<usize> {
    (1..)
        .map(|n| (n as f64 * beat_period_s * fps).round() as usize)
        .take_while(|&b| b + 1 < frames)
        .collect()
}

/// Beat-locked music descriptor: smoothed beat envelope, genre one-hot,
/// harmonics of the beat phase, the phase itself and a beat indicator.
/// Widths above 35 append a fixed random projection of those channels.
pub fn music_features(genre: Genre, frames: usize, fps: f64, beat_period_s: f64, dim: usize) -> MusicFeatures {
    let dim = dim.max(MUSIC_DIM);
    let width = 0.1;
    let beats: std::collections::BTreeSet<usize> = (0..)
        .map(|n| (n as f64 * beat_period_s * fps).round() as usize)
        .take_while(|&b| b < frames)
        .collect();
    let projection: Vec<f64> = if dim > MUSIC_DIM {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6d75_7369_63);
        let s = 1.0 / (MUSIC_DIM as f64).sqrt();
        (0..(dim - MUSIC_DIM) * MUSIC_DIM).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
    } else {
        Vec::new()
    };
    let mut data = Vec::with_capacity(frames * dim);
    let mut row = [0.0f64; MUSIC_DIM];
    for t in 0..frames {
        let phase = (t as f64 / fps / beat_period_s).fract();
        let dist = phase.min(1.0 - phase) * beat_period_s;
        row.fill(0.0);
        row[CH_ENVELOPE] = (-dist * dist / (2.0 * width * width)).exp();
        row[CH_GENRE + genre.index()] = 1.0;
        for k in 0..HARMONICS {
            let a = 2.0 * PI * (k + 1) as f64 * phase;
            row[CH_HARMONIC + 2 * k] = a.sin();
            row[CH_HARMONIC + 2 * k + 1] = a.cos();
        }
        row[CH_PHASE] = phase;
        row[CH_BEAT] = if beats.contains(&t) { 1.0 } else { 0.0 };
        data.extend(row.iter().map(|&v| v as f32));
        for c in 0..dim - MUSIC_DIM {
            let w = &projection[c * MUSIC_DIM..(c + 1) * MUSIC_DIM];
            data.push(w.iter().zip(&row).map(|(a, b)| a * b).sum::<f64>() as f32);
        }
    }
    MusicFeatures { dim, data }
}

/// Fixed unit vector per genre, independent of the dataset seed.
pub fn text_embedding(genre: Genre, dim: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7465_7874_0000 + genre.index() as u64);
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.into_iter().map(|x| (x / norm) as f32).collect()
}

/// Base axis and signed amplitude (radians) of each animated joint.
const ANIMATED: [(usize, [f64; 3], f64); 14] = [
    (joint::L_HIP, [1.0, 0.0, 0.0], -0.5),
    (joint::R_HIP, [1.0, 0.0, 0.0], -0.5),
    (joint::L_KNEE, [1.0, 0.0, 0.0], 0.8),
    (joint::R_KNEE, [1.0, 0.0, 0.0], 0.8),
    (joint::SPINE1, [0.0, 1.0, 0.0], 0.3),
    (joint::SPINE2, [1.0, 0.0, 0.0], 0.2),
    (joint::SPINE3, [0.0, 0.0, 1.0], 0.2),
    (joint::NECK, [0.0, 1.0, 0.0], 0.3),
    (joint::L_COLLAR, [0.0, 0.0, 1.0], 0.2),
    (joint::R_COLLAR, [0.0, 0.0, 1.0], -0.2),
    (joint::L_SHOULDER, [0.0, 0.0, 1.0], -1.0),
    (joint::R_SHOULDER, [0.0, 0.0, 1.0], 1.0),
    (joint::L_ELBOW, [0.0, 1.0, 0.0], 1.2),
    (joint::R_ELBOW, [0.0, 1.0, 0.0], -1.2),
];

struct JointTrack {
    joint: usize,
    axis: Vector3<f64>,
    amplitude: f64,
    multiple: f64,
    phase: f64,
}

/// Genre-level choreography: per-joint weights, axis tilts and frequency multiples.
fn genre_tracks(style: &GenreStyle, beat_period_s: f64) -> Vec<(usize, Vector3<f64>, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6765_6e72_0000 + style.genre.index() as u64);
    let m = beat_multiple(style.base_freq_hz, beat_period_s);
    ANIMATED
        .iter()
        .map(|&(j, axis, amp)| {
            let tilt = Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
            let axis = (Vector3::from(axis) + tilt).normalize();
            let weight = rng.random_range(0.3..1.0);
            let multiple = if rng.random_bool(0.3) { 2.0 * m } else { m };
            (j, axis, style.amplitude * weight * amp, multiple)
        })
        .collect()
}

/// Sequence `index` of the spec. Ids are `syn{index:04}`.
pub fn generate_sequence(spec: &SyntheticSpec, index: usize, skeleton: &SkeletonTemplate) -> Result<DanceSample> {
    spec.validate()?;
    let style = &spec.genres[index % spec.genres.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);

    let scale = rng.random_range(0.85..1.15);
    let tracks: Vec<JointTrack> = genre_tracks(style, spec.beat_period_s)
        .into_iter()
        .map(|(joint, axis, amplitude, multiple)| JointTrack {
            joint,
            axis,
            amplitude: amplitude * scale,
            multiple,
            phase: if rng.random_bool(0.5) { FRAC_PI_2 } else { 0.0 },
        })
        .collect();
    let yaw = rng.random_range(-0.5..0.5);
    let radius_x = rng.random_range(0.2..0.6);
    let radius_z = rng.random_range(0.1..0.3);
    let bounce = 0.04 * style.amplitude;
    let m = beat_multiple(style.base_freq_hz, spec.beat_period_s);
    let p = spec.beat_period_s;

    let frames = spec.frames();
    let mut motion = MotionSequence::rest(frames, spec.fps, Vector3::zeros());
    let heading = axis_angle(&Vector3::y(), yaw);
    for t in 0..frames {
        let s = t as f64 / spec.fps;
        *motion.rotation_mut(t, joint::PELVIS) = Rot6d::from_matrix(&heading)?;
        for tr in &tracks {
            let angle = tr.amplitude * (PI * tr.multiple * s / p + tr.phase).sin().powi(2);
            *motion.rotation_mut(t, tr.joint) = Rot6d::from_matrix(&axis_angle(&tr.axis, angle))?;
        }
        let local = Vector3::new(
            radius_x * (PI * s / (2.0 * p)).sin().powi(2),
            REST_PELVIS_HEIGHT - bounce * (PI * m * s / p).sin().powi(2),
            radius_z * (PI * s / p).sin().powi(2),
        );
        motion.root_translation[t] = heading * local;
    }
    if spec.noise_std > 0.0 {
        for r in motion.rotations.iter_mut() {
            for v in r.0.iter_mut() {
                *v += spec.noise_std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        for x in motion.root_translation.iter_mut() {
            for v in x.iter_mut() {
                *v += spec.noise_std * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }

    let positions = forward_kinematics(&motion, skeleton)?;
    motion.contacts = derive_contact_labels(&positions, skeleton, ContactThresholds::default())?;
    let mut keypoints = project_keypoints(&positions, skeleton, KEYPOINT_SCALE, KEYPOINT_OFFSET);
    if index < spec.glitch_sequences {
        let start = frames / 2;
        let end = (start + spec.fps.round() as usize).min(frames);
        for pt in &mut keypoints.points[start * crate::motion::NUM_KEYPOINTS..end * crate::motion::NUM_KEYPOINTS] {
            pt[0] += 300.0;
        }
    }

    Ok(DanceSample {
        id: format!("syn{index:04}"),
        genre: style.genre,
        motion,
        keypoints,
        music: music_features(style.genre, frames, spec.fps, p, spec.music_dim),
        text: text_embedding(style.genre, spec.text_dim),
        music_beats: beat_frames(frames, spec.fps, p),
    })
}

pub fn generate(spec: &SyntheticSpec, skeleton: &SkeletonTemplate) -> Result<Vec<DanceSample>> {
    (0..spec.n_sequences).map(|i| generate_sequence(spec, i, skeleton)).collect()
}

/// Generates the dataset and writes it with a manifest under `out_dir`.
/// The spec is recorded as provenance.
pub fn write_synthetic(spec: &SyntheticSpec, skeleton: &SkeletonTemplate, out_dir: &Path) -> Result<DatasetManifest> {
    let samples = generate(spec, skeleton)?;
    let provenance = serde_json::json!({ "generator": "synthetic", "spec": spec });
    build_manifest(&samples, out_dir, spec.train_ratio, spec.seed, provenance)
}
