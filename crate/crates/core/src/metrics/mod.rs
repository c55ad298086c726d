//! Evaluation protocol: physical plausibility, distribution distances,
//! diversity and beat alignment.

mod beat;
mod distribution;
mod eval;
mod features;
mod pfc;

pub use beat::{beat_align_score, beat_align_score_from_beats, dance_beats, mean_joint_speed};
pub use distribution::{diversity, frechet_distance, spd_sqrt, COVARIANCE_EPS};
pub use eval::{as_items, evaluate, evaluate_items, EvalConfig, EvalItem, EvalReport, REPORT_SCHEMA_VERSION};
pub use features::{
    geometric_features, geometric_from_positions, kinetic_features, kinetic_from_positions, FeatureKind,
    FeatureSet, GEOMETRIC_DIM, GEOMETRIC_RELATIONS, KINETIC_DIM,
};
pub use pfc::{pfc, pfc_from_positions};
