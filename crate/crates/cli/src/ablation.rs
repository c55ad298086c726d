//! Loss-term ablation: cumulative toggles of the decoder-side losses, each
//! row trained over several seeds and scored on music-conditioned output.

use choreo_core::dataset::DanceSample;
use choreo_core::metrics::{as_items, evaluate_items, EvalConfig, EvalItem, EvalReport};
use choreo_core::motion::{MotionSequence, SkeletonTemplate};
use choreo_models::mct::{train_mct_on, ConditionBundle, GenerateOptions, Mct, MctConfig};
use choreo_models::mkrvq::Rvq;
use serde::Serialize;

use crate::error::Result;

/// Which of rec, gp, kpts, fk are switched on.
pub type Toggles = [bool; 4];

/// CE only, then rec, gp, kpts and fk added one at a time. The contact term
/// is switched together with fk.
pub fn loss_grid(base: &MctConfig) -> Vec<(Toggles, MctConfig)> {
    (0..=4)
        .map(|n| {
            let on = [n >= 1, n >= 2, n >= 3, n >= 4];
            let w = |b: bool| if b { 1.0 } else { 0.0 };
            let cfg = MctConfig {
                lambda_rec: w(on[0]),
                lambda_g: w(on[1]),
                lambda_kpts: w(on[2]),
                lambda_fk: w(on[3]),
                lambda_contact: w(on[3]),
                ..base.clone()
            };
            (on, cfg)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub toggles: Toggles,
    pub pfc: f64,
    pub fid_k: f64,
    pub fid_g: f64,
    pub div_k: f64,
    pub div_g: f64,
    pub bas: f64,
    pub per_seed: Vec<EvalReport>,
}

/// Music and text only, as in the music-to-dance setting.
pub fn music_bundle(sample: &DanceSample) -> ConditionBundle {
    ConditionBundle {
        keypoints: None,
        trajectory: None,
        ..ConditionBundle::from_sample(sample)
    }
}

/// Generates one clip per evaluation sample, trimmed to the sample's length.
pub fn generate_for(mct: &Mct, rvq: &Rvq, samples: &[DanceSample], opts: &GenerateOptions) -> Result<Vec<MotionSequence>> {
    samples
        .iter()
        .map(|s| {
            let g = mct.generate(rvq, &music_bundle(s), None, opts)?;
            Ok(g.motion.slice(0, s.frames()))
        })
        .collect()
}

/// Each row is trained once per entry of `seeds`; every model samples with
/// the same `gen_seed`.
pub fn run_ablation(
    train: &[DanceSample],
    eval: &[DanceSample],
    rvq: &Rvq,
    base: &MctConfig,
    seeds: &[u64],
    gen_seed: u64,
    skeleton: &SkeletonTemplate,
    metrics: EvalConfig,
    mut progress: impl FnMut(&Toggles, u64),
) -> Result<Vec<AblationRow>> {
    let refs = as_items(eval);
    let mut rows = Vec::new();
    for (toggles, cfg) in loss_grid(base) {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            progress(&toggles, seed);
            let (mct, _) = train_mct_on(train, rvq, &cfg, seed, skeleton, |_| {})?;
            let opts = GenerateOptions {
                steps: cfg.inference_steps,
                temperature: cfg.temperature,
                seed: gen_seed,
            };
            let motions = generate_for(&mct, rvq, eval, &opts)?;
            let gen: Vec<EvalItem<'_>> = eval
                .iter()
                .zip(&motions)
                .map(|(s, m)| EvalItem {
                    id: &s.id,
                    motion: m,
                    music_beats: &s.music_beats,
                })
                .collect();
            per_seed.push(evaluate_items(&gen, &refs, skeleton, metrics)?);
        }
        let mean = |f: fn(&EvalReport) -> f64| per_seed.iter().map(f).sum::<f64>() / per_seed.len().max(1) as f64;
        rows.push(AblationRow {
            toggles,
            pfc: mean(|r| r.pfc),
            fid_k: mean(|r| r.fid_k),
            fid_g: mean(|r| r.fid_g),
            div_k: mean(|r| r.div_k),
            div_g: mean(|r| r.div_g),
            bas: mean(|r| r.bas),
            per_seed,
        });
    }
    Ok(rows)
}

/// Markdown table: four toggle columns, then PFC, FID_k, FID_g, Div_k, Div_g, BAS.
pub fn format_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("| L_rec | L_gp | L_kpts | L_fk | PFC | FID_k | FID_g | Div_k | Div_g | BAS |\n");
    out.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
    for r in rows {
        let mark = |b: bool| if b { "x" } else { " " };
        out.push_str(&format!(
            "| {} | {} | {} | {} | {:.4} | {:.2} | {:.2} | {:.2} | {:.2} | {:.4} |\n",
            mark(r.toggles[0]),
            mark(r.toggles[1]),
            mark(r.toggles[2]),
            mark(r.toggles[3]),
            r.pfc,
            r.fid_k,
            r.fid_g,
            r.div_k,
            r.div_g,
            r.bas
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_cumulative() {
        let grid = loss_grid(&MctConfig::default());
        assert_eq!(grid.len(), 5);
        let (t, c) = &grid[0];
        assert_eq!(t, &[false; 4]);
        assert_eq!([c.lambda_rec, c.lambda_g, c.lambda_kpts, c.lambda_fk, c.lambda_contact], [0.0; 5]);
        assert_eq!(grid[1].0, [true, false, false, false]);
        assert_eq!(grid[4].1.lambda_contact, 1.0);
        assert_eq!(grid[3].1.lambda_fk, 0.0);
    }
}
