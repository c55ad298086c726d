//! Capture cleanup: jitter splitting, smoothing, quality filtering, slicing
//! and manifest assembly.

mod filter;
mod jitter;
mod manifest;
mod smoothing;

pub use filter::{
    clip_offsets, head_trim_frames, postprocess_filter, slice_dataset, FilterConfig, FilterReport, Rejection,
    SliceConfig, MIN_SEQUENCE_S,
};
pub use jitter::{jitter_filter_split, jitter_profile, jitter_score, max_jitter, JitterConfig};
pub use manifest::{assign_splits, build_manifest, MANIFEST_FILE};
pub use smoothing::{
    minimize, smooth_motion, smooth_motion_traced, smoothing_objective, smoothness_energy, MinimizeTrace,
    SmoothingConfig,
};

use serde::{Deserialize, Serialize};

use crate::dataset::DanceSample;
use crate::error::Result;
use crate::metrics;
use crate::motion::{MotionSequence, SkeletonTemplate};

/// The penalty entering the smoothing objective; the same function as the metric.
pub fn pfc_penalty(motion: &MotionSequence, skeleton: &SkeletonTemplate) -> Result<f64> {
    metrics::pfc(motion, skeleton)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub smoothing: SmoothingConfig,
    pub filter: FilterConfig,
    pub slicing: SliceConfig,
    pub split_ratio: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            smoothing: SmoothingConfig::default(),
            filter: FilterConfig::default(),
            slicing: SliceConfig::default(),
            split_ratio: 0.8,
        }
    }
}

/// Sequence counts after each stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StageCounts {
    pub input: usize,
    pub after_jitter_split: usize,
    pub after_smoothing: usize,
    pub after_filter: usize,
    pub clips: usize,
    pub filter: FilterReport,
}

/// Runs jitter splitting, smoothing, filtering and slicing in order.
/// Segments produced by a split are suffixed `_s{k}`; sequences too short
/// for a single jitter evaluation pass through unsplit.
pub fn preprocess(
    sequences: Vec<DanceSample>,
    skeleton: &SkeletonTemplate,
    cfg: &PipelineConfig,
) -> Result<(Vec<DanceSample>, StageCounts)> {
    cfg.slicing.validate()?;
    cfg.smoothing.validate()?;
    let mut counts = StageCounts {
        input: sequences.len(),
        ..Default::default()
    };

    let mut segments = Vec::new();
    for seq in sequences {
        let jcfg = cfg.filter.jitter_for(seq.fps());
        jcfg.validate()?;
        if seq.frames() < jcfg.span() {
            segments.push(seq);
            continue;
        }
        let runs = jitter_filter_split(&seq.keypoints, &jcfg).map_err(|e| e.in_sample(&seq.id))?;
        if runs == [(0, seq.frames())] {
            segments.push(seq);
            continue;
        }
        for (k, (a, b)) in runs.into_iter().enumerate() {
            segments.push(seq.slice(a, b, format!("{}_s{k}", seq.id)));
        }
    }
    counts.after_jitter_split = segments.len();

    let mut smoothed = Vec::with_capacity(segments.len());
    for mut seg in segments {
        if seg.frames() >= 3 {
            seg.motion = smooth_motion(&seg.motion, skeleton, &cfg.smoothing).map_err(|e| e.in_sample(&seg.id))?;
        }
        smoothed.push(seg);
    }
    counts.after_smoothing = smoothed.len();

    let (kept, report) = postprocess_filter(smoothed, skeleton, &cfg.filter)?;
    counts.after_filter = kept.len();
    counts.filter = report;

    let clips = slice_dataset(&kept, &cfg.slicing)?;
    counts.clips = clips.len();
    Ok((clips, counts))
}
