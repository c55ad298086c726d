//! Head trimming, quality filtering and fixed-length slicing.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{DanceSample, Genre};
use crate::error::{Error, Result};
use crate::metrics::pfc;
use crate::motion::SkeletonTemplate;

use super::jitter::{max_jitter, JitterConfig};

/// Shortest sequence (seconds) the slicer accepts, and the smallest clip length.
pub const MIN_SEQUENCE_S: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    /// Jitter window length and stride in seconds; frames follow each sequence's fps.
    pub jitter_window_s: f64,
    pub jitter_stride_s: f64,
    /// Windows scoring above this (px^2) split a sequence; segments whose
    /// worst score still exceeds it are dropped.
    pub jitter_threshold: f64,
    /// Segments whose PFC exceeds this are dropped.
    pub pfc_threshold: f64,
    pub head_trim_s: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            jitter_window_s: 2.0,
            jitter_stride_s: 1.0,
            jitter_threshold: 1.0e5,
            pfc_threshold: 1.0,
            head_trim_s: 5.0,
        }
    }
}

/// Why a segment did not survive [`postprocess_filter`].
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Rejection {
    TooShort { frames: usize },
    Jitter { id: String, score: f64 },
    Pfc { id: String, score: f64 },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FilterReport {
    pub kept: usize,
    pub rejected: Vec<Rejection>,
}

impl FilterConfig {
    pub fn jitter_for(&self, fps: f64) -> JitterConfig {
        JitterConfig {
            window_len: ((self.jitter_window_s * fps).round() as usize).max(1),
            stride: ((self.jitter_stride_s * fps).round() as usize).max(1),
            threshold: self.jitter_threshold,
        }
    }
}

pub fn head_trim_frames(fps: f64, head_trim_s: f64) -> usize {
    // guard against 5.0 * 29.97-style products landing a hair above an integer
    (head_trim_s * fps - 1e-9).ceil().max(0.0) as usize
}

/// Drops the first `head_trim_s` seconds of every segment, then rejects
/// segments that are empty, jittery or physically implausible. The jitter
/// window follows each segment's frame rate.
pub fn postprocess_filter(
    segments: Vec<DanceSample>,
    skeleton: &SkeletonTemplate,
    cfg: &FilterConfig,
) -> Result<(Vec<DanceSample>, FilterReport)> {
    let mut report = FilterReport::default();
    let mut kept = Vec::new();
    for seg in segments {
        let trim = head_trim_frames(seg.fps(), cfg.head_trim_s);
        if seg.frames() <= trim || seg.frames() - trim < 3 {
            report.rejected.push(Rejection::TooShort { frames: seg.frames() });
            continue;
        }
        let id = seg.id.clone();
        let seg = seg.slice(trim, seg.frames(), id.clone());
        let jitter = max_jitter(&seg.keypoints, &cfg.jitter_for(seg.fps()))?;
        if jitter > cfg.jitter_threshold {
            report.rejected.push(Rejection::Jitter { id, score: jitter });
            continue;
        }
        let score = pfc(&seg.motion, skeleton).map_err(|e| e.in_sample(&id))?;
        if score > cfg.pfc_threshold {
            report.rejected.push(Rejection::Pfc { id, score });
            continue;
        }
        kept.push(seg);
    }
    report.kept = kept.len();
    Ok((kept, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SliceConfig {
    pub clip_len_s: f64,
    pub stride_s: f64,
    /// Per-genre stride overrides; abundant genres get larger strides.
    pub genre_stride_s: BTreeMap<Genre, f64>,
}

impl Default for SliceConfig {
    fn default() -> Self {
        SliceConfig {
            clip_len_s: 10.0,
            stride_s: 5.0,
            genre_stride_s: BTreeMap::new(),
        }
    }
}

impl SliceConfig {
    pub fn stride_for(&self, genre: Genre) -> f64 {
        self.genre_stride_s.get(&genre).copied().unwrap_or(self.stride_s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip_len_s >= MIN_SEQUENCE_S) {
            return Err(Error::InvalidClipLength(self.clip_len_s));
        }
        let strides = std::iter::once(self.stride_s).chain(self.genre_stride_s.values().copied());
        for s in strides {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::InvalidConfig(format!("slice stride {s} must be positive")));
            }
        }
        Ok(())
    }
}

/// Clip start frames for a sequence of `frames` frames: `0, s, 2s, ...` for
/// as long as a full clip fits.
pub fn clip_offsets(frames: usize, fps: f64, clip_len_s: f64, stride_s: f64) -> Vec<usize> {
    if (frames as f64) / fps < MIN_SEQUENCE_S {
        return Vec::new();
    }
    let clip = (clip_len_s * fps - 1e-9).ceil() as usize;
    let stride = ((stride_s * fps).round() as usize).max(1);
    (0..).map(|k| k * stride).take_while(|o| o + clip <= frames).collect()
}

/// Cuts every sequence of at least ten seconds into fixed-length clips named
/// `{id}_c{k:03}`. The truncated tail is dropped.
pub fn slice_dataset(sequences: &[DanceSample], cfg: &SliceConfig) -> Result<Vec<DanceSample>> {
    cfg.validate()?;
    let mut clips = Vec::new();
    for seq in sequences {
        let clip = (cfg.clip_len_s * seq.fps() - 1e-9).ceil() as usize;
        for (k, start) in clip_offsets(seq.frames(), seq.fps(), cfg.clip_len_s, cfg.stride_for(seq.genre))
            .into_iter()
            .enumerate()
        {
            clips.push(seq.slice(start, start + clip, format!("{}_c{k:03}", seq.id)));
        }
    }
    Ok(clips)
}
