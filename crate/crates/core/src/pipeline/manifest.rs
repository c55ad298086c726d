//! Writing clips to disk under a seeded train/test split.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{DanceSample, DatasetManifest, Split};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Shuffles `0..n` with the seed and marks the first `round(ratio * n)` as train.
pub fn assign_splits(n: usize, ratio: f64, seed: u64) -> Result<Vec<Split>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidConfig(format!("split ratio {ratio} outside [0, 1]")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (ratio * n as f64).round() as usize;
    let mut splits = vec![Split::Test; n];
    for &i in &order[..n_train] {
        splits[i] = Split::Train;
    }
    Ok(splits)
}

/// Checks alignment of every clip, writes its modality files into `out_dir`
/// and saves `out_dir/manifest.json`. Ids must be unique.
pub fn build_manifest(
    clips: &[DanceSample],
    out_dir: &Path,
    ratio: f64,
    seed: u64,
    provenance: serde_json::Value,
) -> Result<DatasetManifest> {
    let mut seen = std::collections::BTreeSet::new();
    for c in clips {
        c.check_alignment()?;
        if !seen.insert(c.id.as_str()) {
            return Err(Error::InvalidConfig(format!("duplicate sample id `{}`", c.id)));
        }
    }
    let splits = assign_splits(clips.len(), ratio, seed)?;
    let mut manifest = DatasetManifest::empty(out_dir);
    manifest.provenance = provenance;
    for (clip, split) in clips.iter().zip(splits) {
        manifest.samples.push(clip.write(out_dir, split)?);
    }
    manifest.save(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
