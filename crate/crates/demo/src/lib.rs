//! Browser bindings for the static demo page in `www/`.
//!
//! Three operations: synthesize a dance and stream its joint positions,
//! smooth a noisy take, and scan a glitched keypoint track for jitter.
//! The plain functions below do the work; the `#[wasm_bindgen]` layer only
//! converts errors.

use choreo_core::dataset::{DanceSample, Genre};
use choreo_core::metrics::{beat_align_score, pfc};
use choreo_core::motion::{forward_kinematics, MotionSequence, SkeletonTemplate, JOINT_NAMES, NUM_JOINTS};
use choreo_core::pipeline::{jitter_filter_split, jitter_profile, smooth_motion, smoothness_energy, FilterConfig, SmoothingConfig};
use choreo_core::synth::{generate_sequence, GenreStyle, SyntheticSpec};
use serde_json::json;
use wasm_bindgen::prelude::*;

pub type Result<T> = std::result::Result<T, String>;

fn parse_genre(name: &str) -> Result<Genre> {
    serde_json::from_value(json!(name)).map_err(|_| format!("unknown genre {name:?}"))
}

pub fn genre_names() -> Vec<String> {
    Genre::ALL
        .iter()
        .map(|g| serde_json::to_value(g).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default())
        .collect()
}

/// Generator floor on sequence length; shorter requests are cut from a 12 s take.
const MIN_TAKE_S: f64 = 12.0;

/// One movement per beat at `bpm`.
pub fn synthesize(genre: &str, bpm: f64, amplitude: f64, noise: f64, seconds: f64, seed: u64, glitch: bool) -> Result<DanceSample> {
    if !(30.0..=240.0).contains(&bpm) {
        return Err(format!("tempo {bpm} outside 30..240 bpm"));
    }
    if !(1.0..=120.0).contains(&seconds) {
        return Err(format!("length {seconds} s outside 1..120 s"));
    }
    let spec = SyntheticSpec {
        n_sequences: 1,
        duration_s: seconds.max(MIN_TAKE_S),
        genres: vec![GenreStyle {
            genre: parse_genre(genre)?,
            base_freq_hz: bpm / 60.0,
            amplitude,
        }],
        beat_period_s: 60.0 / bpm,
        seed,
        noise_std: noise,
        glitch_sequences: usize::from(glitch),
        ..Default::default()
    };
    spec.validate().map_err(|e| e.to_string())?;
    let take = generate_sequence(&spec, 0, &SkeletonTemplate::default()).map_err(|e| e.to_string())?;
    let frames = ((seconds * spec.fps).round() as usize).min(take.frames());
    Ok(take.slice(0, frames, take.id.clone()))
}

/// Frame-major `x, y, z` for every joint.
pub fn flat_positions(motion: &MotionSequence) -> Result<Vec<f32>> {
    let pos = forward_kinematics(motion, &SkeletonTemplate::default()).map_err(|e| e.to_string())?;
    Ok(pos.data.iter().flat_map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect())
}

pub fn motion_stats(motion: &MotionSequence, music_beats: &[usize]) -> Result<serde_json::Value> {
    let sk = SkeletonTemplate::default();
    let e = |e: choreo_core::Error| e.to_string();
    Ok(json!({
        "pfc": pfc(motion, &sk).map_err(e)?,
        "bas": beat_align_score(motion, &sk, music_beats, 3.0).map_err(e)?,
        "energy": smoothness_energy(motion, &sk, SmoothingConfig::default().lambda).map_err(e)?,
    }))
}

/// Jitter score of every scanned window and the clean segments that survive.
pub fn jitter_report(sample: &DanceSample) -> Result<serde_json::Value> {
    let filter = FilterConfig::default();
    let cfg = filter.jitter_for(sample.fps());
    let profile = jitter_profile(&sample.keypoints, &cfg).map_err(|e| e.to_string())?;
    let segments = jitter_filter_split(&sample.keypoints, &cfg).map_err(|e| e.to_string())?;
    Ok(json!({
        "starts": profile.iter().map(|p| p.0).collect::<Vec<_>>(),
        "scores": profile.iter().map(|p| p.1).collect::<Vec<_>>(),
        "threshold": cfg.threshold,
        "window": cfg.window_len,
        "stride": cfg.stride,
        "frames": sample.frames(),
        "segments": segments,
    }))
}

#[wasm_bindgen]
pub fn genres() -> String {
    json!(genre_names()).to_string()
}

/// `parent[j]`, -1 for the root.
#[wasm_bindgen]
pub fn parents() -> Vec<i32> {
    SkeletonTemplate::default().parent_index.iter().map(|p| p.map_or(-1, |p| p as i32)).collect()
}

/// 1 for left-side joints, 2 for right, 0 on the midline.
#[wasm_bindgen]
pub fn joint_sides() -> Vec<u8> {
    JOINT_NAMES
        .iter()
        .map(|n| if n.starts_with("left") { 1 } else if n.starts_with("right") { 2 } else { 0 })
        .collect()
}

#[wasm_bindgen]
pub fn joint_count() -> usize {
    NUM_JOINTS
}

#[wasm_bindgen]
pub struct Dance {
    sample: DanceSample,
    shown: MotionSequence,
}

#[wasm_bindgen]
impl Dance {
    #[wasm_bindgen(constructor)]
    pub fn new(genre: &str, bpm: f64, amplitude: f64, noise: f64, seconds: f64, seed: u64) -> std::result::Result<Dance, JsError> {
        let sample = synthesize(genre, bpm, amplitude, noise, seconds, seed, false).map_err(|e| JsError::new(&e))?;
        Ok(Dance {
            shown: sample.motion.clone(),
            sample,
        })
    }

    pub fn frames(&self) -> usize {
        self.shown.frames()
    }

    pub fn fps(&self) -> f64 {
        self.shown.fps
    }

    pub fn beats(&self) -> Vec<u32> {
        self.sample.music_beats.iter().map(|&b| b as u32).collect()
    }

    pub fn positions(&self) -> std::result::Result<Vec<f32>, JsError> {
        flat_positions(&self.shown).map_err(|e| JsError::new(&e))
    }

    /// JSON `{pfc, bas, energy}` of the motion currently shown.
    pub fn stats(&self) -> std::result::Result<String, JsError> {
        Ok(motion_stats(&self.shown, &self.sample.music_beats).map_err(|e| JsError::new(&e))?.to_string())
    }

    /// Replaces the shown motion with a smoothed copy of the original.
    pub fn smooth(&mut self, iters: usize, lambda: f64, w_pfc: f64) -> std::result::Result<(), JsError> {
        let cfg = SmoothingConfig {
            iters,
            lambda,
            w_pfc,
            ..Default::default()
        };
        self.shown = smooth_motion(&self.sample.motion, &SkeletonTemplate::default(), &cfg).map_err(|e| JsError::new(&e.to_string()))?;
        Ok(())
    }

    pub fn reset(&mut self) {
        self.shown = self.sample.motion.clone();
    }
}

/// JSON jitter scan of a sequence with a one-second keypoint glitch.
#[wasm_bindgen]
pub fn jitter_scan(genre: &str, bpm: f64, seconds: f64, seed: u64) -> std::result::Result<String, JsError> {
    let sample = synthesize(genre, bpm, 1.0, 0.0, seconds, seed, true).map_err(|e| JsError::new(&e))?;
    Ok(jitter_report(&sample).map_err(|e| JsError::new(&e))?.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_genre_name_parses() {
        let names = genre_names();
        assert_eq!(names.len(), 14);
        for n in &names {
            parse_genre(n).unwrap();
        }
        assert!(parse_genre("polka").is_err());
    }

    #[test]
    fn positions_cover_every_joint_and_frame() {
        let s = synthesize("street", 75.0, 1.0, 0.0, 4.0, 1, false).unwrap();
        assert_eq!(s.frames(), 40);
        assert_eq!(flat_positions(&s.motion).unwrap().len(), s.frames() * NUM_JOINTS * 3);
        assert!(synthesize("street", 500.0, 1.0, 0.0, 4.0, 1, false).is_err());
    }

    #[test]
    fn smoothing_a_noisy_take_lowers_its_energy() {
        let s = synthesize("house", 120.0, 1.0, 0.03, 3.0, 2, false).unwrap();
        let cfg = SmoothingConfig { iters: 40, ..Default::default() };
        let out = smooth_motion(&s.motion, &SkeletonTemplate::default(), &cfg).unwrap();
        let before = motion_stats(&s.motion, &s.music_beats).unwrap()["energy"].as_f64().unwrap();
        let after = motion_stats(&out, &s.music_beats).unwrap()["energy"].as_f64().unwrap();
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn glitch_splits_the_keypoint_track() {
        let s = synthesize("jazz", 75.0, 1.0, 0.0, 20.0, 0, true).unwrap();
        let r = jitter_report(&s).unwrap();
        let segments = r["segments"].as_array().unwrap();
        assert_eq!(segments.len(), 2, "{r}");
        let peak = r["scores"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).fold(0.0, f64::max);
        assert!(peak > r["threshold"].as_f64().unwrap());
    }
}
