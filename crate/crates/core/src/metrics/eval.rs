use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::beat::{beat_align_score_from_beats, dance_beats};
use super::distribution::{diversity, frechet_distance};
use super::features::{geometric_from_positions, kinetic_from_positions, FeatureKind, FeatureSet};
use super::pfc::pfc_from_positions;
use crate::dataset::{DanceSample, DatasetManifest};
use crate::error::{Error, Result};
use crate::motion::{forward_kinematics, MotionSequence, SkeletonTemplate};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Beat-alignment kernel width, frames.
    pub sigma: f64,
    /// Upper bound on samples drawn from each side.
    pub max_samples: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            sigma: 3.0,
            max_samples: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub schema_version: u32,
    pub pfc: f64,
    pub fid_k: f64,
    pub fid_g: f64,
    pub div_k: f64,
    pub div_g: f64,
    /// Diversity of the reference set, the target for `div_k`/`div_g`.
    pub div_k_ref: f64,
    pub div_g_ref: f64,
    pub bas: f64,
    pub n_gen: usize,
    pub n_ref: usize,
    pub config: EvalConfig,
}

/// One motion to score, with the music beats it was generated against.
pub struct EvalItem<'a> {
    pub id: &'a str,
    pub motion: &'a MotionSequence,
    pub music_beats: &'a [usize],
}

struct Scored {
    kinetic: Vec<f64>,
    geometric: Vec<f64>,
    pfc: f64,
    bas: Option<f64>,
}

fn score(item: &EvalItem<'_>, skeleton: &SkeletonTemplate, sigma: f64) -> Result<Scored> {
    let run = || -> Result<Scored> {
        if item.motion.frames() < 4 {
            return Err(Error::TooShort { need: 4, got: item.motion.frames() });
        }
        let pos = forward_kinematics(item.motion, skeleton)?;
        let bas = if item.music_beats.is_empty() {
            None
        } else {
            Some(beat_align_score_from_beats(item.music_beats, &dance_beats(&pos), sigma)?)
        };
        Ok(Scored {
            kinetic: kinetic_from_positions(&pos),
            geometric: geometric_from_positions(&pos, skeleton),
            pfc: pfc_from_positions(&pos, skeleton.foot_point_ids)?.0,
            bas,
        })
    };
    run().map_err(|e| e.in_sample(item.id))
}

/// Deterministic subset of at most `max` indices.
fn pick(n: usize, max: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if n > max {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(max);
        idx.sort_unstable();
    }
    idx
}

/// Full metric suite. PFC and BAS are averaged over generated samples; FID and
/// diversity come from the pooled feature sets. Summation runs in sample order.
pub fn evaluate_items(
    generated: &[EvalItem<'_>],
    reference: &[EvalItem<'_>],
    skeleton: &SkeletonTemplate,
    cfg: EvalConfig,
) -> Result<EvalReport> {
    for (side, items) in [("generated", generated), ("reference", reference)] {
        if items.len() < 2 {
            return Err(Error::InsufficientSamples { need: 2, got: items.len() })
                .map_err(|e| e.in_sample(side));
        }
    }
    let gen_idx = pick(generated.len(), cfg.max_samples, cfg.seed);
    let ref_idx = pick(reference.len(), cfg.max_samples, cfg.seed.wrapping_add(1));
    let gen: Vec<Scored> = gen_idx.iter().map(|&i| score(&generated[i], skeleton, cfg.sigma)).collect::<Result<_>>()?;
    let refs: Vec<Scored> = ref_idx.iter().map(|&i| score(&reference[i], skeleton, cfg.sigma)).collect::<Result<_>>()?;

    let set = |xs: &[Scored], kind| {
        FeatureSet::new(
            kind,
            xs.iter()
                .map(|s| match kind {
                    FeatureKind::Kinetic => s.kinetic.clone(),
                    FeatureKind::Geometric => s.geometric.clone(),
                })
                .collect(),
        )
    };
    let gk = set(&gen, FeatureKind::Kinetic)?;
    let gg = set(&gen, FeatureKind::Geometric)?;
    let rk = set(&refs, FeatureKind::Kinetic)?;
    let rg = set(&refs, FeatureKind::Geometric)?;

    let bas_values: Vec<f64> = gen.iter().filter_map(|s| s.bas).collect();
    if bas_values.is_empty() {
        return Err(Error::NoMusicBeats);
    }
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        pfc: gen.iter().map(|s| s.pfc).sum::<f64>() / gen.len() as f64,
        fid_k: frechet_distance(&gk, &rk)?,
        fid_g: frechet_distance(&gg, &rg)?,
        div_k: diversity(&gk)?,
        div_g: diversity(&gg)?,
        div_k_ref: diversity(&rk)?,
        div_g_ref: diversity(&rg)?,
        bas: bas_values.iter().sum::<f64>() / bas_values.len() as f64,
        n_gen: gen.len(),
        n_ref: refs.len(),
        config: cfg,
    })
}

/// [`evaluate_items`] over every sample of two manifests.
pub fn evaluate(
    generated: &DatasetManifest,
    reference: &DatasetManifest,
    skeleton: &SkeletonTemplate,
    cfg: EvalConfig,
) -> Result<EvalReport> {
    let gen = generated.load_all()?;
    let refs = reference.load_all()?;
    evaluate_items(&as_items(&gen), &as_items(&refs), skeleton, cfg)
}

pub fn as_items(samples: &[DanceSample]) -> Vec<EvalItem<'_>> {
    samples
        .iter()
        .map(|s| EvalItem {
            id: &s.id,
            motion: &s.motion,
            music_beats: &s.music_beats,
        })
        .collect()
}
