//! Temporal smoothing of captured motion by first-order optimization.
//!
//! The objective over rotations `theta` and root translation `phi` is
//!
//! ```text
//! F = w_data (|theta - theta_raw|^2 + |phi - phi_raw|^2)
//!   + sum_t |theta_{t+1} - theta_t|^2
//!   + lambda sum_j sum_t |X_{j,t+1} - X_{j,t}|^2
//!   + w_pfc PFC(theta, phi)
//! ```
//!
//! with `X = FK(theta, phi)`. The smoothness terms alone are minimized by a
//! constant sequence; the data term anchors the result to the estimate.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::pfc_from_positions;
use crate::motion::forward_kinematics_cached;
use crate::motion::{
    derive_contact_labels, forward_kinematics_vjp, ContactThresholds, MotionSequence, Rot6d, SkeletonTemplate,
    NUM_JOINTS,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmoothingConfig {
    /// Weight of the joint-position smoothness term.
    pub lambda: f64,
    pub w_data: f64,
    pub w_pfc: f64,
    pub iters: usize,
    /// Initial gradient step; halved whenever a step would raise the objective.
    pub step_size: f64,
    /// Stop once an accepted step lowers the objective by less than this.
    pub tol: f64,
    pub contacts: ContactThresholds,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        SmoothingConfig {
            lambda: 0.5,
            w_data: 1.0,
            w_pfc: 0.1,
            iters: 200,
            step_size: 0.01,
            tol: 1e-10,
            contacts: ContactThresholds::default(),
        }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda, self.w_data, self.w_pfc];
        if weights.iter().any(|w| !(*w >= 0.0)) || self.iters < 1 || !(self.step_size > 0.0) {
            return Err(Error::InvalidConfig(format!("bad smoothing config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinimizeTrace {
    /// Objective after every accepted step, starting with the initial value.
    pub objective: Vec<f64>,
    pub step_size: f64,
}

/// Plain gradient descent with step halving. A trial step is accepted only if
/// it does not increase the objective, so the returned trace is
/// non-increasing. Trials that fail to evaluate count as increases.
pub fn minimize<F>(x0: Vec<f64>, mut eval: F, iters: usize, step_size: f64, tol: f64) -> Result<(Vec<f64>, MinimizeTrace)>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut x = x0;
    let (mut f, mut g) = eval(&x)?;
    if !f.is_finite() || !step_size.is_finite() {
        return Err(Error::NonFiniteObjective(0));
    }
    let mut step = step_size;
    let mut trace = vec![f];
    'outer: for it in 0..iters {
        loop {
            let trial: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - step * gi).collect();
            match eval(&trial) {
                Ok((f_new, g_new)) if f_new.is_finite() && f_new <= f => {
                    let decrease = f - f_new;
                    x = trial;
                    f = f_new;
                    g = g_new;
                    trace.push(f);
                    if decrease < tol {
                        break 'outer;
                    }
                    break;
                }
                Ok((f_new, _)) if f_new.is_nan() && step < 1e-300 => return Err(Error::NonFiniteObjective(it + 1)),
                _ => {
                    step *= 0.5;
                    if step < 1e-16 * step_size {
                        break 'outer;
                    }
                }
            }
        }
    }
    Ok((x, MinimizeTrace { objective: trace, step_size: step }))
}

const ROT_PARAMS: usize = NUM_JOINTS * 6;

fn pack(motion: &MotionSequence) -> Vec<f64> {
    let mut x = Vec::with_capacity(motion.frames() * (ROT_PARAMS + 3));
    for r in &motion.rotations {
        x.extend_from_slice(&r.0);
    }
    for p in &motion.root_translation {
        x.extend(p.iter());
    }
    x
}

fn unpack(x: &[f64], template: &MotionSequence) -> MotionSequence {
    let frames = template.frames();
    let mut m = template.clone();
    for (i, r) in m.rotations.iter_mut().enumerate() {
        *r = Rot6d(std::array::from_fn(|k| x[i * 6 + k]));
    }
    let base = frames * ROT_PARAMS;
    for (t, p) in m.root_translation.iter_mut().enumerate() {
        *p = Vector3::new(x[base + 3 * t], x[base + 3 * t + 1], x[base + 3 * t + 2]);
    }
    m
}

/// Objective value and gradient with respect to the packed parameters.
fn objective(
    x: &[f64],
    raw: &[f64],
    template: &MotionSequence,
    skeleton: &SkeletonTemplate,
    cfg: &SmoothingConfig,
) -> Result<(f64, Vec<f64>)> {
    let frames = template.frames();
    let mut grad = vec![0.0; x.len()];
    let mut value = 0.0;

    for i in 0..x.len() {
        let d = x[i] - raw[i];
        value += cfg.w_data * d * d;
        grad[i] += 2.0 * cfg.w_data * d;
    }
    for t in 0..frames - 1 {
        for k in 0..ROT_PARAMS {
            let d = x[(t + 1) * ROT_PARAMS + k] - x[t * ROT_PARAMS + k];
            value += d * d;
            grad[(t + 1) * ROT_PARAMS + k] += 2.0 * d;
            grad[t * ROT_PARAMS + k] -= 2.0 * d;
        }
    }

    if cfg.lambda == 0.0 && cfg.w_pfc == 0.0 {
        return Ok((value, grad));
    }
    let motion = unpack(x, template);
    let (positions, cache) = forward_kinematics_cached(&motion, skeleton)?;
    let mut g_pos = vec![Vector3::zeros(); positions.data.len()];
    if cfg.lambda > 0.0 {
        for t in 0..frames - 1 {
            for j in 0..NUM_JOINTS {
                let d = positions.at(t + 1, j) - positions.at(t, j);
                value += cfg.lambda * d.norm_squared();
                g_pos[(t + 1) * NUM_JOINTS + j] += d * (2.0 * cfg.lambda);
                g_pos[t * NUM_JOINTS + j] -= d * (2.0 * cfg.lambda);
            }
        }
    }
    if cfg.w_pfc > 0.0 {
        let (pfc, g) = pfc_from_positions(&positions, skeleton.foot_point_ids)?;
        value += cfg.w_pfc * pfc;
        for (a, b) in g_pos.iter_mut().zip(g) {
            *a += b * cfg.w_pfc;
        }
    }
    let (g_rot, g_root) = forward_kinematics_vjp(&motion, skeleton, &cache, &g_pos)?;
    for (i, g) in g_rot.iter().enumerate() {
        for k in 0..6 {
            grad[i * 6 + k] += g[k];
        }
    }
    let base = frames * ROT_PARAMS;
    for (t, g) in g_root.iter().enumerate() {
        for k in 0..3 {
            grad[base + 3 * t + k] += g[k];
        }
    }
    Ok((value, grad))
}

/// Value of the smoothing objective for `motion` measured against `raw`.
pub fn smoothing_objective(
    motion: &MotionSequence,
    raw: &MotionSequence,
    skeleton: &SkeletonTemplate,
    cfg: &SmoothingConfig,
) -> Result<f64> {
    Ok(objective(&pack(motion), &pack(raw), raw, skeleton, cfg)?.0)
}

/// The smoothness part alone (`E_s`), without data or contact terms.
pub fn smoothness_energy(motion: &MotionSequence, skeleton: &SkeletonTemplate, lambda: f64) -> Result<f64> {
    let cfg = SmoothingConfig {
        lambda,
        w_data: 0.0,
        w_pfc: 0.0,
        ..Default::default()
    };
    smoothing_objective(motion, motion, skeleton, &cfg)
}

/// Runs the optimizer from the raw estimate and re-derives contact labels on the result.
pub fn smooth_motion(raw: &MotionSequence, skeleton: &SkeletonTemplate, cfg: &SmoothingConfig) -> Result<MotionSequence> {
    smooth_motion_traced(raw, skeleton, cfg).map(|(m, _)| m)
}

pub fn smooth_motion_traced(
    raw: &MotionSequence,
    skeleton: &SkeletonTemplate,
    cfg: &SmoothingConfig,
) -> Result<(MotionSequence, MinimizeTrace)> {
    cfg.validate()?;
    raw.validate()?;
    if raw.frames() < 3 {
        return Err(Error::TooShort { need: 3, got: raw.frames() });
    }
    let x0 = pack(raw);
    let anchor = x0.clone();
    let (x, trace) = minimize(
        x0,
        |x| objective(x, &anchor, raw, skeleton, cfg),
        cfg.iters,
        cfg.step_size,
        cfg.tol,
    )?;
    let mut out = unpack(&x, raw);
    let positions = crate::motion::forward_kinematics(&out, skeleton)?;
    out.contacts = derive_contact_labels(&positions, skeleton, cfg.contacts)?;
    Ok((out, trace))
}
