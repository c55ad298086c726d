//! Windowed keypoint jitter scoring and the split it drives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{Keypoints2DSequence, NUM_KEYPOINTS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JitterConfig {
    /// Window length W, frames.
    pub window_len: usize,
    /// Offset s between the two compared windows, also the scan step, frames.
    pub stride: usize,
    /// Scores above this (px^2) mark the windows as jittery.
    pub threshold: f64,
}

impl JitterConfig {
    /// Two-second windows compared one second apart.
    pub fn for_fps(fps: f64) -> Self {
        let window_len = (2.0 * fps).round().max(1.0) as usize;
        JitterConfig {
            window_len,
            stride: (window_len / 2).max(1),
            threshold: 1.0e5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len < 1 || self.stride < 1 || !(self.threshold > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "jitter window {} / stride {} must be >= 1 and threshold {} > 0",
                self.window_len, self.stride, self.threshold
            )));
        }
        Ok(())
    }

    /// Frames spanned by one score evaluation: both windows.
    pub fn span(&self) -> usize {
        self.window_len + self.stride
    }
}

/// Mean of keypoint `k` over frames `[start, start + len)`, summed directly
/// in frame order so scores are reproducible bit for bit.
fn window_mean(kpts: &Keypoints2DSequence, start: usize, len: usize, k: usize) -> [f64; 2] {
    let mut sum = [0.0, 0.0];
    for t in start..start + len {
        let p = kpts.point(t, k);
        sum[0] += p[0];
        sum[1] += p[1];
    }
    [sum[0] / len as f64, sum[1] / len as f64]
}

fn score(kpts: &Keypoints2DSequence, cfg: &JitterConfig, i: usize) -> f64 {
    let mut total = 0.0;
    for k in 0..NUM_KEYPOINTS {
        let m0 = window_mean(kpts, i, cfg.window_len, k);
        let m1 = window_mean(kpts, i + cfg.stride, cfg.window_len, k);
        let (dx, dy) = (m0[0] - m1[0], m0[1] - m1[1]);
        total += dx * dx + dy * dy;
    }
    total
}

/// `J(i) = sum_k |mean_{[i, i+W)} p_k - mean_{[i+s, i+s+W)} p_k|^2` over the
/// 17 keypoints. Confidence is ignored.
pub fn jitter_score(kpts: &Keypoints2DSequence, cfg: &JitterConfig, i: usize) -> Result<f64> {
    cfg.validate()?;
    let end = i + cfg.span();
    if end > kpts.frames() {
        return Err(Error::WindowOutOfRange {
            start: i,
            end,
            len: kpts.frames(),
        });
    }
    Ok(score(kpts, cfg, i))
}

/// Scores at every scan position `0, s, 2s, ...` that fits in the sequence.
pub fn jitter_profile(kpts: &Keypoints2DSequence, cfg: &JitterConfig) -> Result<Vec<(usize, f64)>> {
    cfg.validate()?;
    let frames = kpts.frames();
    Ok((0..)
        .map(|n| n * cfg.stride)
        .take_while(|i| i + cfg.span() <= frames)
        .map(|i| (i, score(kpts, cfg, i)))
        .collect())
}

pub fn max_jitter(kpts: &Keypoints2DSequence, cfg: &JitterConfig) -> Result<f64> {
    Ok(jitter_profile(kpts, cfg)?.into_iter().map(|(_, j)| j).fold(0.0, f64::max))
}

/// Frame intervals `[start, end)` left after removing every frame covered
/// (in either window) by an over-threshold score. Only runs of at least `W`
/// frames are kept.
pub fn jitter_filter_split(kpts: &Keypoints2DSequence, cfg: &JitterConfig) -> Result<Vec<(usize, usize)>> {
    let frames = kpts.frames();
    let mut bad = vec![false; frames];
    for (i, score) in jitter_profile(kpts, cfg)? {
        if score > cfg.threshold {
            bad[i..i + cfg.span()].iter_mut().for_each(|b| *b = true);
        }
    }
    let mut out = Vec::new();
    let mut start = None;
    for t in 0..=frames {
        let good = t < frames && !bad[t];
        match (good, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                if t - s >= cfg.window_len {
                    out.push((s, t));
                }
                start = None;
            }
            _ => {}
        }
    }
    Ok(out)
}
