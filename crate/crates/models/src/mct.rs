//! Masked multimodal-condition transformer over tokenizer codes.
//!
//! The base layer is predicted by masked modelling; each deeper layer is
//! predicted in one pass from the layer above it. Frame-aligned conditions
//! are mean-pooled to the token rate, projected, and summed per position;
//! text becomes one prepended token. Anything missing or masked is replaced
//! by a learned null embedding.

use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use candle_core::{Device, Module, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use choreo_core::dataset::{DanceSample, DatasetManifest, MusicFeatures, Split};
use choreo_core::motion::{
    forward_kinematics as host_fk, Keypoints2DSequence, MotionSequence, SkeletonTemplate, TrajectorySequence,
    KEYPOINT_WIDTH, NUM_FOOT_POINTS, NUM_JOINTS, POSE_WIDTH, ROTATION_WIDTH,
};
use choreo_core::tensor_file::TensorArchive;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::fk::forward_kinematics;
use crate::mkrvq::{hash_bytes, straight_through, Normalizer, Rvq, RvqConfig, CONTINUOUS_WIDTH};
use crate::nn::{l1, scalar, Block, Init, LayerNorm, Linear, ParamStore, Scope};
use crate::quantizer::TokenSequence;

pub const MCT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MctConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    /// Longest token sequence, not counting the text token.
    pub max_positions: usize,
    /// Per-frame mask rates for surviving keypoint and trajectory streams.
    pub p_k: f64,
    pub p_g: f64,
    pub keep_music: f64,
    pub keep_kpts: f64,
    pub keep_traj: f64,
    pub keep_text: f64,
    pub lambda_rec: f64,
    pub lambda_g: f64,
    pub lambda_kpts: f64,
    pub lambda_fk: f64,
    pub lambda_contact: f64,
    /// Unmasking rounds S at inference.
    pub inference_steps: usize,
    /// Sampling temperature at the first round; decays linearly to 0 at the last.
    pub temperature: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability that a batch trains the base layer rather than a deeper one.
    pub base_prob: f64,
    /// Training crop in frames; 0 uses the shortest clip.
    pub window: usize,
}

impl Default for MctConfig {
    fn default() -> Self {
        MctConfig {
            d_model: 384,
            layers: 6,
            heads: 6,
            max_positions: 256,
            p_k: 0.5,
            p_g: 0.5,
            keep_music: 0.9,
            keep_kpts: 0.5,
            keep_traj: 0.5,
            keep_text: 0.5,
            lambda_rec: 1.0,
            lambda_g: 1.0,
            lambda_kpts: 1.0,
            lambda_fk: 0.0,
            lambda_contact: 0.0,
            inference_steps: 10,
            temperature: 1.0,
            steps: 2000,
            batch_size: 8,
            learning_rate: 3e-4,
            base_prob: 0.5,
            window: 0,
        }
    }
}

impl MctConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.inference_steps < 1 {
            return Err(ModelError::InvalidSteps);
        }
        if self.d_model == 0 || self.layers == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} must split into {} heads", self.d_model, self.heads));
        }
        let probs = [
            self.p_k,
            self.p_g,
            self.keep_music,
            self.keep_kpts,
            self.keep_traj,
            self.keep_text,
            self.base_prob,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("probabilities must lie in [0, 1]".into());
        }
        let weights = [
            self.lambda_rec,
            self.lambda_g,
            self.lambda_kpts,
            self.lambda_fk,
            self.lambda_contact,
            self.temperature,
            self.learning_rate,
        ];
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return bad("loss weights, temperature and learning rate must be >= 0".into());
        }
        if self.batch_size < 1 || self.max_positions < 1 {
            return bad("batch_size and max_positions must be >= 1".into());
        }
        Ok(())
    }

    fn decoder_supervised(&self) -> bool {
        self.lambda_rec > 0.0 || self.lambda_g > 0.0 || self.lambda_kpts > 0.0 || self.fk_supervised()
    }

    fn fk_supervised(&self) -> bool {
        self.lambda_fk > 0.0 || self.lambda_contact > 0.0
    }
}

/// Sizes fixed by the tokenizer and the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MctDims {
    pub codebook_size: usize,
    pub rvq_layers: usize,
    pub downsample: usize,
    pub music_dim: usize,
    pub text_dim: usize,
}

impl MctDims {
    pub fn new(rvq: &RvqConfig, music_dim: usize, text_dim: usize) -> Self {
        MctDims {
            codebook_size: rvq.codebook_size,
            rvq_layers: rvq.layers,
            downsample: rvq.downsample,
            music_dim,
            text_dim,
        }
    }

    /// Sentinel id of the [MASK] token.
    pub fn mask_id(&self) -> usize {
        self.codebook_size
    }
}

/// Conditioning streams for one clip. Any stream may be absent.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    pub frames: usize,
    pub fps: f64,
    pub music: Option<MusicFeatures>,
    pub keypoints: Option<Keypoints2DSequence>,
    pub trajectory: Option<TrajectorySequence>,
    pub text: Option<Vec<f32>>,
    pub music_beats: Vec<usize>,
}

impl ConditionBundle {
    /// Every stream of a sample, trajectory taken from the motion root.
    pub fn from_sample(s: &DanceSample) -> Self {
        ConditionBundle {
            frames: s.frames(),
            fps: s.fps(),
            music: Some(s.music.clone()),
            keypoints: Some(s.keypoints.clone()),
            trajectory: Some(s.motion.trajectory()),
            text: Some(s.text.clone()),
            music_beats: s.music_beats.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, frames: Option<usize>| match frames {
            Some(f) if f != self.frames => Err(ModelError::FrameMisalignment(format!(
                "{name} has {f} frames, bundle has {}",
                self.frames
            ))),
            _ => Ok(()),
        };
        check("music", self.music.as_ref().map(|m| m.frames()))?;
        check("keypoints", self.keypoints.as_ref().map(|k| k.frames()))?;
        check("trajectory", self.trajectory.as_ref().map(|g| g.frames()))?;
        Ok(())
    }

    pub fn latent_len(&self, downsample: usize) -> usize {
        self.frames.div_ceil(downsample)
    }

    /// Frames `[start, end)`; beats are re-indexed into the slice.
    pub fn slice(&self, start: usize, end: usize) -> Self {
        ConditionBundle {
            frames: end - start,
            fps: self.fps,
            music: self.music.as_ref().map(|m| m.slice(start, end)),
            keypoints: self.keypoints.as_ref().map(|k| k.slice(start, end)),
            trajectory: self.trajectory.as_ref().map(|g| TrajectorySequence {
                fps: g.fps,
                positions: g.positions[start..end].to_vec(),
            }),
            text: self.text.clone(),
            music_beats: self.music_beats.iter().filter(|b| (start..end).contains(*b)).map(|b| b - start).collect(),
        }
    }
}

/// `true` marks a masked token or frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPattern {
    pub token_mask: Vec<bool>,
    pub kpt_frame_mask: Vec<bool>,
    pub traj_frame_mask: Vec<bool>,
}

impl MaskPattern {
    pub fn none(frames: usize, latent_len: usize) -> Self {
        MaskPattern {
            token_mask: vec![false; latent_len],
            kpt_frame_mask: vec![false; frames],
            traj_frame_mask: vec![false; frames],
        }
    }
}

/// Drops each stream with probability `1 - keep`, then masks frames of
/// surviving keypoint and trajectory streams at rates `p_k` and `p_g`. The
/// token mask is left clear; [`mask_tokens`] picks those positions.
pub fn sample_condition_combo(
    bundle: &ConditionBundle,
    cfg: &MctConfig,
    downsample: usize,
    rng: &mut impl Rng,
) -> (ConditionBundle, MaskPattern) {
    let mut out = bundle.clone();
    let keep = [cfg.keep_music, cfg.keep_kpts, cfg.keep_traj, cfg.keep_text].map(|p| rng.random_bool(p));
    if !keep[0] {
        out.music = None;
    }
    if !keep[1] {
        out.keypoints = None;
    }
    if !keep[2] {
        out.trajectory = None;
    }
    if !keep[3] {
        out.text = None;
    }
    let t = bundle.frames;
    let mut frame_mask = |present: bool, p: f64| -> Vec<bool> {
        if present {
            (0..t).map(|_| rng.random_bool(p)).collect()
        } else {
            vec![false; t]
        }
    };
    let kpt_frame_mask = frame_mask(out.keypoints.is_some(), cfg.p_k);
    let traj_frame_mask = frame_mask(out.trajectory.is_some(), cfg.p_g);
    let masks = MaskPattern {
        token_mask: vec![false; bundle.latent_len(downsample)],
        kpt_frame_mask,
        traj_frame_mask,
    };
    (out, masks)
}

/// Replaces exactly `ceil(ratio * T')` distinct positions, drawn uniformly
/// without replacement, by `mask_id`. Returns the ids and sorted positions.
pub fn mask_tokens(ids: &[usize], ratio: f64, mask_id: usize, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let n = ids.len();
    let count = ((ratio.clamp(0.0, 1.0) * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut positions = rand::seq::index::sample(rng, n, count.min(n)).into_vec();
    positions.sort_unstable();
    let mut out = ids.to_vec();
    for &p in &positions {
        out[p] = mask_id;
    }
    (out, positions)
}

/// Positions left masked after round `step` (0-based) of `steps`, given
/// `masked` (at least 1) before it: `floor(T' cos(pi/2 (step+1)/steps))`,
/// forced below `masked` so every round fixes at least one token.
pub fn still_masked_after(len: usize, step: usize, steps: usize, masked: usize) -> usize {
    if step + 1 >= steps {
        return 0;
    }
    let cosine = (len as f64 * (FRAC_PI_2 * (step + 1) as f64 / steps as f64).cos()).floor() as usize;
    cosine.min(masked.saturating_sub(1))
}

/// Statistics used to normalize keypoint and trajectory conditions; they
/// come from the tokenizer so both models see the same scale.
#[derive(Debug, Clone, PartialEq)]
pub struct CondNorms {
    pub keypoints: Normalizer,
    pub trajectory: Normalizer,
}

impl CondNorms {
    pub fn from_rvq(rvq: &Rvq) -> Self {
        let m = &rvq.motion_norm;
        let r = ROTATION_WIDTH..ROTATION_WIDTH + 3;
        CondNorms {
            keypoints: rvq.keypoint_norm.clone(),
            trajectory: Normalizer {
                mean: m.mean[r.clone()].to_vec(),
                std: m.std[r].to_vec(),
            },
        }
    }

    pub fn identity() -> Self {
        CondNorms {
            keypoints: Normalizer::identity(KEYPOINT_WIDTH),
            trajectory: Normalizer::identity(3),
        }
    }
}

/// Conditions pooled to the token rate. Masked windows and absent streams
/// hold zeros with their `on` flag at 0.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledConditions {
    pub len: usize,
    pub music: Vec<f32>,
    pub music_on: Vec<f32>,
    pub kpts: Vec<f32>,
    pub kpts_on: Vec<f32>,
    pub traj: Vec<f32>,
    pub traj_on: Vec<f32>,
    pub text: Vec<f32>,
    pub text_on: f32,
}

/// Mean over the unmasked frames of each `r`-frame window.
fn pool_stream(rows: Option<&[f32]>, width: usize, frames: usize, r: usize, mask: &[bool]) -> (Vec<f32>, Vec<f32>) {
    let len = frames.div_ceil(r);
    let mut out = vec![0.0f32; len * width];
    let mut on = vec![0.0f32; len];
    let Some(rows) = rows else { return (out, on) };
    for w in 0..len {
        let mut acc = vec![0.0f64; width];
        let mut n = 0usize;
        for t in w * r..((w + 1) * r).min(frames) {
            if mask.get(t).copied().unwrap_or(false) {
                continue;
            }
            n += 1;
            for (a, v) in acc.iter_mut().zip(&rows[t * width..(t + 1) * width]) {
                *a += *v as f64;
            }
        }
        if n > 0 {
            on[w] = 1.0;
            for (o, a) in out[w * width..(w + 1) * width].iter_mut().zip(&acc) {
                *o = (*a / n as f64) as f32;
            }
        }
    }
    (out, on)
}

pub fn pool_conditions(
    bundle: &ConditionBundle,
    masks: &MaskPattern,
    dims: &MctDims,
    norms: &CondNorms,
) -> Result<PooledConditions> {
    bundle.validate()?;
    let (t, r) = (bundle.frames, dims.downsample);
    if masks.kpt_frame_mask.len() != t || masks.traj_frame_mask.len() != t {
        return Err(ModelError::FrameMisalignment(format!(
            "frame masks of {} and {} frames for a {t}-frame bundle",
            masks.kpt_frame_mask.len(),
            masks.traj_frame_mask.len()
        )));
    }
    if let Some(m) = &bundle.music {
        if m.dim != dims.music_dim {
            return Err(ModelError::ShapeMismatch(format!("music width {} vs model {}", m.dim, dims.music_dim)));
        }
    }
    let kpt_rows = bundle.keypoints.as_ref().map(|k| norms.keypoints.apply(&k.to_rows()));
    let traj_rows = bundle.trajectory.as_ref().map(|g| {
        let raw: Vec<f32> = g.positions.iter().flat_map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect();
        norms.trajectory.apply(&raw)
    });
    let none = vec![false; t];
    let (music, music_on) = pool_stream(bundle.music.as_ref().map(|m| &m.data[..]), dims.music_dim, t, r, &none);
    let (kpts, kpts_on) = pool_stream(kpt_rows.as_deref(), KEYPOINT_WIDTH, t, r, &masks.kpt_frame_mask);
    let (traj, traj_on) = pool_stream(traj_rows.as_deref(), 3, t, r, &masks.traj_frame_mask);
    let (text, text_on) = match &bundle.text {
        Some(v) if v.len() == dims.text_dim => (v.clone(), 1.0),
        Some(v) => {
            return Err(ModelError::ShapeMismatch(format!("text width {} vs model {}", v.len(), dims.text_dim)));
        }
        None => (vec![0.0; dims.text_dim], 0.0),
    };
    Ok(PooledConditions {
        len: t.div_ceil(r),
        music,
        music_on,
        kpts,
        kpts_on,
        traj,
        traj_on,
        text,
        text_on,
    })
}

/// Transformer weights.
#[derive(Debug, Clone)]
pub struct MctNet {
    music: Linear,
    kpts: Linear,
    traj: Linear,
    text: Linear,
    null_music: Tensor,
    null_kpts: Tensor,
    null_traj: Tensor,
    null_text: Tensor,
    /// Table `i` embeds source layer `i + 1`; table 0 has the extra [MASK] row.
    tokens: Vec<Tensor>,
    tags: Tensor,
    pos: Tensor,
    blocks: Vec<Block>,
    ln: LayerNorm,
    heads: Vec<Linear>,
    d: usize,
    max_positions: usize,
}

impl MctNet {
    pub fn new(store: &mut ParamStore, cfg: &MctConfig, dims: &MctDims) -> Result<Self> {
        let d = cfg.d_model;
        let k = dims.codebook_size;
        let n = dims.rvq_layers;
        let mut vb = Scope::root(store);
        let small = Init::Normal(0.02);
        let mut cond = vb.pp("cond");
        let music = Linear::new(&mut cond.pp("music"), dims.music_dim, d)?;
        let kpts = Linear::new(&mut cond.pp("kpts"), KEYPOINT_WIDTH, d)?;
        let traj = Linear::new(&mut cond.pp("traj"), 3, d)?;
        let text = Linear::new(&mut cond.pp("text"), dims.text_dim, d)?;
        let null_music = cond.get("null_music", &[d], small)?;
        let null_kpts = cond.get("null_kpts", &[d], small)?;
        let null_traj = cond.get("null_traj", &[d], small)?;
        let null_text = cond.get("null_text", &[d], small)?;
        let mut tokens = Vec::new();
        for l in 0..n.saturating_sub(1).max(1) {
            let rows = if l == 0 { k + 1 } else { k };
            tokens.push(vb.get(&format!("tok{l}"), &[rows, d], small)?);
        }
        let tags = vb.get("tags", &[n, d], small)?;
        let pos = vb.get("pos", &[cfg.max_positions + 1, d], small)?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            blocks.push(Block::new(&mut vb.pp(format!("block{i}")), d, cfg.heads)?);
        }
        let ln = LayerNorm::new(&mut vb.pp("ln"), d)?;
        let mut heads = Vec::with_capacity(n);
        for l in 0..n {
            heads.push(Linear::new(&mut vb.pp(format!("head{l}")), d, k)?);
        }
        Ok(MctNet {
            music,
            kpts,
            traj,
            text,
            null_music,
            null_kpts,
            null_traj,
            null_text,
            tokens,
            tags,
            pos,
            blocks,
            ln,
            heads,
            d,
            max_positions: cfg.max_positions,
        })
    }

    /// Per-position condition embedding `(B, T', d)` and text token `(B, 1, d)`.
    pub fn conditions(&self, pooled: &[PooledConditions]) -> Result<(Tensor, Tensor)> {
        let b = pooled.len();
        let t = pooled.first().map(|p| p.len).unwrap_or(0);
        if b == 0 || pooled.iter().any(|p| p.len != t) {
            return Err(ModelError::ShapeMismatch("condition batch must share one length".into()));
        }
        let device = Device::Cpu;
        let d = self.d;
        let stream = |proj: &Linear, null: &Tensor, rows: Vec<f32>, on: Vec<f32>, n: usize| -> Result<Tensor> {
            let width = rows.len() / (b * n);
            let x = Tensor::from_vec(rows, (b, n, width), &device)?;
            let on = Tensor::from_vec(on, (b, n, 1), &device)?;
            let off = on.affine(-1.0, 1.0)?;
            Ok((proj.forward(&x)?.broadcast_mul(&on)? + null.reshape((1, 1, d))?.broadcast_mul(&off)?)?)
        };
        let cat = |f: &dyn Fn(&PooledConditions) -> &Vec<f32>| -> Vec<f32> { pooled.iter().flat_map(|p| f(p).iter().copied()).collect() };
        let music = stream(&self.music, &self.null_music, cat(&|p| &p.music), cat(&|p| &p.music_on), t)?;
        let kpts = stream(&self.kpts, &self.null_kpts, cat(&|p| &p.kpts), cat(&|p| &p.kpts_on), t)?;
        let traj = stream(&self.traj, &self.null_traj, cat(&|p| &p.traj), cat(&|p| &p.traj_on), t)?;
        let text = stream(
            &self.text,
            &self.null_text,
            cat(&|p| &p.text),
            pooled.iter().map(|p| p.text_on).collect(),
            1,
        )?;
        Ok((((music + kpts)? + traj)?, text))
    }

    fn embed(&self, table: usize, ids: &[usize], b: usize, t: usize) -> Result<Tensor> {
        let rows = self.tokens[table].dim(0)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(ModelError::IndexOutOfRange { id: bad, k: rows });
        }
        let idx: Vec<u32> = ids.iter().map(|&i| i as u32).collect();
        let idx = Tensor::from_vec(idx, ids.len(), &Device::Cpu)?;
        Ok(self.tokens[table].index_select(&idx, 0)?.reshape((b, t, self.d))?)
    }

    fn run(&self, x: Tensor, cond: &(Tensor, Tensor), tag: usize, head: usize) -> Result<Tensor> {
        let (_, t, _) = x.dims3()?;
        if t > self.max_positions {
            return Err(ModelError::ShapeMismatch(format!("{t} tokens exceed max_positions {}", self.max_positions)));
        }
        let body = (x + &cond.0)?
            .broadcast_add(&self.pos.narrow(0, 1, t)?)?
            .broadcast_add(&self.tags.narrow(0, tag, 1)?)?;
        let lead = cond.1.broadcast_add(&self.pos.narrow(0, 0, 1)?)?;
        let mut h = Tensor::cat(&[lead, body], 1)?;
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        let h = self.ln.forward(&h)?.narrow(1, 1, t)?;
        Ok(self.heads[head].forward(&h)?)
    }

    /// Logits `(B, T', k)` for layer-1 ids, [MASK] allowed.
    pub fn forward_base(&self, masked_ids: &[usize], cond: &(Tensor, Tensor)) -> Result<Tensor> {
        let (b, t, _) = cond.0.dims3()?;
        self.run(self.embed(0, masked_ids, b, t)?, cond, 0, 0)
    }

    /// Logits `(B, T', k)` for layer `n` (1-based, `2..=N`) from the ids of layer `n - 1`.
    pub fn forward_layer(&self, prev_ids: &[usize], n: usize, cond: &(Tensor, Tensor)) -> Result<Tensor> {
        let layers = self.heads.len();
        if n < 2 || n > layers {
            return Err(ModelError::LayerOutOfRange { layer: n, layers });
        }
        let (b, t, _) = cond.0.dims3()?;
        // layer 2 shares the base table, whose last row is [MASK]
        let k = self.heads[0].out_dim()?;
        if let Some(&bad) = prev_ids.iter().find(|&&i| i >= k) {
            return Err(ModelError::IndexOutOfRange { id: bad, k });
        }
        self.run(self.embed(n - 2, prev_ids, b, t)?, cond, n - 1, n - 1)
    }
}

/// Mean negative log-likelihood over positions where `mask` is set.
pub fn masked_cross_entropy(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<Tensor> {
    let (b, t, k) = logits.dims3()?;
    if targets.len() != b * t || mask.len() != b * t {
        return Err(ModelError::ShapeMismatch(format!("{} targets for {b}x{t} logits", targets.len())));
    }
    let count = mask.iter().filter(|m| **m).count();
    if count == 0 {
        return Ok(Tensor::zeros((), logits.dtype(), logits.device())?);
    }
    let mut pick = vec![0.0f32; b * t * k];
    for (i, (&id, &m)) in targets.iter().zip(mask).enumerate() {
        if id >= k {
            return Err(ModelError::IndexOutOfRange { id, k });
        }
        if m {
            pick[i * k + id] = 1.0;
        }
    }
    let pick = Tensor::from_vec(pick, (b, t, k), logits.device())?.to_dtype(logits.dtype())?;
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    Ok(((logp * pick)?.sum_all()? * (-1.0 / count as f64))?)
}

pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    masked_cross_entropy(logits, targets, &vec![true; targets.len()])
}

/// Decoder-side loss terms, scalar tensors.
#[derive(Debug, Clone)]
pub struct Supervision {
    pub rec: Tensor,
    pub gp: Tensor,
    pub kpts: Tensor,
    pub fk: Tensor,
    pub contact: Tensor,
}

/// Ground truth a decoded prediction is scored against.
#[derive(Debug, Clone)]
pub struct DecoderTargets {
    /// `(B, 151, T)` normalized pose.
    pub x: Tensor,
    /// `(B, 34, T)` normalized keypoints.
    pub k: Tensor,
    /// `(B, T, 24, 3)` joint positions in meters.
    pub positions: Tensor,
    /// `(B, T, 4)` contact labels.
    pub contacts: Tensor,
}

/// Reconstruction, trajectory and keypoint L1 in normalized units; FK and
/// contact terms on un-normalized joint positions (skipped when `with_fk`
/// is false). Contact logits are not part of `rec`.
pub fn supervision_terms(
    targets: &DecoderTargets,
    x_pred: &Tensor,
    k_pred: &Tensor,
    motion_norm: &Normalizer,
    skeleton: &SkeletonTemplate,
    with_fk: bool,
) -> Result<Supervision> {
    let zero = Tensor::zeros((), x_pred.dtype(), x_pred.device())?;
    let cont = |x: &Tensor| x.narrow(1, 0, CONTINUOUS_WIDTH);
    let root = |x: &Tensor| x.narrow(1, ROTATION_WIDTH, 3);
    let rec = l1(&cont(&targets.x)?, &cont(x_pred)?)?;
    let gp = l1(&root(&targets.x)?, &root(x_pred)?)?;
    let kpts = l1(&targets.k, k_pred)?;
    let (fk, contact) = if with_fk {
        let (mean, std) = motion_norm.tensors(x_pred.device())?;
        let mean = mean.narrow(1, 0, CONTINUOUS_WIDTH)?.to_dtype(x_pred.dtype())?;
        let std = std.narrow(1, 0, CONTINUOUS_WIDTH)?.to_dtype(x_pred.dtype())?;
        let raw = cont(x_pred)?.broadcast_mul(&std)?.broadcast_add(&mean)?.transpose(1, 2)?.contiguous()?;
        let pos = forward_kinematics(&raw, skeleton)?;
        let fk = l1(&targets.positions, &pos)?;
        let (b, t, _, _) = pos.dims4()?;
        let contact = if t > 1 {
            let ids: Vec<u32> = skeleton.foot_point_ids.iter().map(|&i| i as u32).collect();
            let ids = Tensor::from_vec(ids, NUM_FOOT_POINTS, x_pred.device())?;
            let gap = (targets.positions.contiguous()?.index_select(&ids, 2)? - pos.contiguous()?.index_select(&ids, 2)?)?;
            let sq = (gap.sqr()?.sum(D::Minus1)? * &targets.contacts)?;
            (sq.narrow(1, 0, t - 1)?.sum_all()? / ((t - 1) * b) as f64)?
        } else {
            zero.clone()
        };
        (fk, contact)
    } else {
        (zero.clone(), zero)
    };
    Ok(Supervision { rec, gp, kpts, fk, contact })
}

#[derive(Debug, Clone)]
pub struct MctLoss {
    pub ce_mask: Tensor,
    pub ce_layer: Tensor,
    pub rec: Tensor,
    pub gp: Tensor,
    pub kpts: Tensor,
    pub fk: Tensor,
    pub contact: Tensor,
    pub total: Tensor,
}

/// Which objective a batch trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    Base,
    /// Deeper layer `n`, 1-based.
    Layer(usize),
}

/// Targets for one batch of [`mct_loss`].
#[derive(Debug, Clone)]
pub struct LossBatch {
    pub kind: StepKind,
    pub batch: usize,
    pub len: usize,
    /// Ground-truth ids per tokenizer layer, each `batch * len` long.
    pub tokens: Vec<Vec<usize>>,
    /// Base positions scored by the masked CE.
    pub mask: Vec<bool>,
    pub decoder: Option<DecoderTargets>,
}

/// Base batches pay the masked CE plus decoder terms on the predicted
/// layer-1 latent (argmax codes, softmax-weighted gradient, ground truth at
/// unmasked positions, ground-truth deeper layers); deeper batches pay the
/// full-sequence CE of their layer.
pub fn mct_loss(rvq: &Rvq, batch: &LossBatch, logits: &Tensor, cfg: &MctConfig, skeleton: &SkeletonTemplate) -> Result<MctLoss> {
    let zero = Tensor::zeros((), logits.dtype(), logits.device())?;
    let (b, t) = (batch.batch, batch.len);
    let mut loss = MctLoss {
        ce_mask: zero.clone(),
        ce_layer: zero.clone(),
        rec: zero.clone(),
        gp: zero.clone(),
        kpts: zero.clone(),
        fk: zero.clone(),
        contact: zero.clone(),
        total: zero,
    };
    match batch.kind {
        StepKind::Layer(n) => {
            loss.ce_layer = cross_entropy(logits, &batch.tokens[n - 1])?;
        }
        StepKind::Base => {
            loss.ce_mask = masked_cross_entropy(logits, &batch.tokens[0], &batch.mask)?;
            if let (Some(targets), true) = (&batch.decoder, cfg.decoder_supervised()) {
                let book = rvq.codebook_tensor(0)?;
                let k = book.dim(0)?;
                let d = book.dim(1)?;
                let flat = logits.reshape((b * t, k))?;
                let soft = candle_nn::ops::softmax(&flat, D::Minus1)?.matmul(&book)?;
                let argmax: Vec<u32> = flat.argmax(D::Minus1)?.to_vec1::<u32>()?;
                let lookup = |ids: Vec<u32>, book: &Tensor| -> Result<Tensor> {
                    Ok(book.index_select(&Tensor::from_vec(ids, b * t, logits.device())?, 0)?)
                };
                let hard = lookup(argmax, &book)?;
                let truth = lookup(batch.tokens[0].iter().map(|&i| i as u32).collect(), &book)?;
                let on: Vec<f32> = batch.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
                let on = Tensor::from_vec(on, (b * t, 1), logits.device())?;
                let z1 = (straight_through(&soft, &hard)?.broadcast_mul(&on)? + truth.broadcast_mul(&on.affine(-1.0, 1.0)?)?)?;
                let mut z = z1.clone();
                for l in 1..batch.tokens.len() {
                    let deeper = lookup(batch.tokens[l].iter().map(|&i| i as u32).collect(), &rvq.codebook_tensor(l)?)?;
                    z = (z + deeper)?;
                }
                let to_bct = |z: Tensor| -> Result<Tensor> { Ok(z.reshape((b, t, d))?.transpose(1, 2)?.contiguous()?) };
                let x_pred = rvq.net.decode_motion(&to_bct(z)?)?;
                let k_pred = rvq.net.decode_keypoints(&to_bct(z1)?)?;
                let s = supervision_terms(targets, &x_pred, &k_pred, &rvq.motion_norm, skeleton, cfg.fk_supervised())?;
                loss.rec = s.rec;
                loss.gp = s.gp;
                loss.kpts = s.kpts;
                loss.fk = s.fk;
                loss.contact = s.contact;
            }
        }
    }
    loss.total = ((((((&loss.ce_mask + &loss.ce_layer)? + (&loss.rec * cfg.lambda_rec)?)? + (&loss.gp * cfg.lambda_g)?)?
        + (&loss.kpts * cfg.lambda_kpts)?)?
        + (&loss.fk * cfg.lambda_fk)?)?
        + (&loss.contact * cfg.lambda_contact)?)?;
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MctLogRow {
    pub step: usize,
    /// `base` or `layerN`.
    pub kind: String,
    pub ce_mask: f64,
    pub ce_layer: f64,
    pub rec: f64,
    pub gp: f64,
    pub kpts: f64,
    pub fk: f64,
    pub contact: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateOptions {
    pub steps: usize,
    pub temperature: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub motion: MotionSequence,
    pub tokens: TokenSequence,
    /// Masked base positions before the first round and after each round.
    pub masked_per_round: Vec<usize>,
}

/// Token-level fit on a set of clips with every condition present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEval {
    pub masked_ce: f64,
    pub masked_accuracy: f64,
    /// Argmax accuracy of layers 2..=N given the ground-truth layer above.
    pub layer_accuracy: Vec<f64>,
}

/// A trained transformer tied to one tokenizer checkpoint.
pub struct Mct {
    pub config: MctConfig,
    pub dims: MctDims,
    pub seed: u64,
    pub steps: usize,
    pub rvq_hash: String,
    pub net: MctNet,
    store: ParamStore,
}

fn argmax_rows(logits: &Tensor) -> Result<Vec<usize>> {
    Ok(logits.argmax(D::Minus1)?.flatten_all()?.to_vec1::<u32>()?.into_iter().map(|i| i as usize).collect())
}

/// Rows of `(1, T', k)` logits as host vectors.
fn logit_rows(logits: &Tensor) -> Result<Vec<Vec<f32>>> {
    Ok(logits.squeeze(0)?.to_dtype(candle_core::DType::F32)?.to_vec2::<f32>()?)
}

fn softmax_row(row: &[f32], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = row.iter().map(|v| *v as f64 / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

fn first_argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

impl Mct {
    /// Untrained weights drawn from `seed`.
    pub fn new(config: &MctConfig, dims: MctDims, seed: u64, rvq_hash: String) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed);
        let net = MctNet::new(&mut store, config, &dims)?;
        Ok(Mct {
            config: config.clone(),
            dims,
            seed,
            steps: 0,
            rvq_hash,
            net,
            store,
        })
    }

    pub fn encode_conditions(&self, bundle: &ConditionBundle, masks: &MaskPattern, norms: &CondNorms) -> Result<(Tensor, Tensor)> {
        self.net.conditions(&[pool_conditions(bundle, masks, &self.dims, norms)?])
    }

    /// Logits `(T', k)` for one clip.
    pub fn forward_base(&self, masked_ids: &[usize], cond: &(Tensor, Tensor)) -> Result<Tensor> {
        Ok(self.net.forward_base(masked_ids, cond)?.squeeze(0)?)
    }

    pub fn forward_layer(&self, prev_ids: &[usize], n: usize, cond: &(Tensor, Tensor)) -> Result<Tensor> {
        Ok(self.net.forward_layer(prev_ids, n, cond)?.squeeze(0)?)
    }

    fn check_rvq(&self, rvq: &Rvq) -> Result<()> {
        if MctDims::new(&rvq.config, self.dims.music_dim, self.dims.text_dim) != self.dims {
            return Err(ModelError::CheckpointMismatch("tokenizer shape differs from the one trained against".into()));
        }
        Ok(())
    }

    /// Iterative unmasking of the base layer, then one pass per deeper layer,
    /// then the tokenizer decoder. Returns `T' * r` frames.
    pub fn generate(
        &self,
        rvq: &Rvq,
        bundle: &ConditionBundle,
        masks: Option<&MaskPattern>,
        opts: &GenerateOptions,
    ) -> Result<Generated> {
        if opts.steps < 1 {
            return Err(ModelError::InvalidSteps);
        }
        self.check_rvq(rvq)?;
        let len = bundle.latent_len(self.dims.downsample);
        let none = MaskPattern::none(bundle.frames, len);
        let cond = self.encode_conditions(bundle, masks.unwrap_or(&none), &CondNorms::from_rvq(rvq))?;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mask_id = self.dims.mask_id();
        let mut ids = vec![mask_id; len];
        let mut history = vec![len];
        let s_total = opts.steps;
        for s in 0..s_total {
            let masked: Vec<usize> = (0..len).filter(|&p| ids[p] == mask_id).collect();
            if masked.is_empty() {
                break;
            }
            let rows = logit_rows(&self.net.forward_base(&ids, &cond)?)?;
            let tau = opts.temperature * (1.0 - (s + 1) as f64 / s_total as f64);
            let mut picks: Vec<(usize, usize, f64)> = Vec::with_capacity(masked.len());
            for &p in &masked {
                let id = if tau <= 0.0 {
                    first_argmax(&rows[p])
                } else {
                    let probs = softmax_row(&rows[p], tau);
                    WeightedIndex::new(&probs).map_err(|e| ModelError::NonFinite(format!("sampling weights: {e}")))?.sample(&mut rng)
                };
                let confidence = softmax_row(&rows[p], 1.0)[id];
                picks.push((p, id, confidence));
            }
            let remain = still_masked_after(len, s, s_total, masked.len());
            picks.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
            for &(p, id, _) in &picks[..masked.len() - remain] {
                ids[p] = id;
            }
            history.push(remain);
        }
        let mut layers = vec![ids];
        for n in 2..=self.dims.rvq_layers {
            let next = argmax_rows(&self.net.forward_layer(layers.last().unwrap(), n, &cond)?)?;
            layers.push(next);
        }
        let tokens = TokenSequence { len, ids: layers };
        let z = rvq.dequantize(&tokens, self.dims.rvq_layers)?;
        let motion = rvq.decode_motion(&z, bundle.fps)?;
        Ok(Generated {
            motion,
            tokens,
            masked_per_round: history,
        })
    }

    /// Masked CE and accuracy of the base layer at `ratio` masking, plus
    /// deeper-layer accuracy, with every condition stream present.
    pub fn evaluate_tokens(&self, rvq: &Rvq, samples: &[DanceSample], ratio: f64, seed: u64) -> Result<TokenEval> {
        self.check_rvq(rvq)?;
        let norms = CondNorms::from_rvq(rvq);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut nll, mut hits, mut count) = (0.0f64, 0usize, 0usize);
        let n_layers = self.dims.rvq_layers;
        let mut layer_hits = vec![0usize; n_layers.saturating_sub(1)];
        let mut positions = 0usize;
        for s in samples {
            let tokens = rvq.tokenize(&s.motion)?;
            let bundle = ConditionBundle::from_sample(s);
            let cond = self.encode_conditions(&bundle, &MaskPattern::none(bundle.frames, tokens.len), &norms)?;
            let (masked, where_) = mask_tokens(&tokens.ids[0], ratio, self.dims.mask_id(), &mut rng);
            let rows = logit_rows(&self.net.forward_base(&masked, &cond)?)?;
            for &p in &where_ {
                let truth = tokens.ids[0][p];
                nll -= softmax_row(&rows[p], 1.0)[truth].max(f64::MIN_POSITIVE).ln();
                hits += usize::from(first_argmax(&rows[p]) == truth);
                count += 1;
            }
            for n in 2..=n_layers {
                let pred = argmax_rows(&self.net.forward_layer(&tokens.ids[n - 2], n, &cond)?)?;
                layer_hits[n - 2] += pred.iter().zip(&tokens.ids[n - 1]).filter(|(a, b)| a == b).count();
            }
            positions += tokens.len;
        }
        let count = count.max(1) as f64;
        Ok(TokenEval {
            masked_ce: nll / count,
            masked_accuracy: hits as f64 / count,
            layer_accuracy: layer_hits.iter().map(|h| *h as f64 / positions.max(1) as f64).collect(),
        })
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut archive = TensorArchive {
            meta: serde_json::json!({
                "schema_version": MCT_SCHEMA_VERSION,
                "kind": "mct",
                "config": self.config,
                "dims": self.dims,
                "seed": self.seed,
                "steps": self.steps,
                "rvq_hash": self.rvq_hash,
            }),
            tensors: Vec::new(),
        };
        self.store.write_into(&mut archive, "net.")?;
        Ok(archive)
    }

    /// Loads a checkpoint and checks it was trained against `rvq`.
    pub fn from_archive(archive: &TensorArchive, rvq: &Rvq) -> Result<Self> {
        let meta = &archive.meta;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("mct") {
            return Err(ModelError::CheckpointMismatch("not a transformer checkpoint".into()));
        }
        let version = meta.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != MCT_SCHEMA_VERSION {
            return Err(choreo_core::Error::SchemaVersion {
                found: version,
                expected: MCT_SCHEMA_VERSION,
            }
            .into());
        }
        let parse = |key: &str| meta.get(key).cloned().unwrap_or_default();
        let config: MctConfig =
            serde_json::from_value(parse("config")).map_err(|e| ModelError::CheckpointMismatch(format!("config: {e}")))?;
        let dims: MctDims =
            serde_json::from_value(parse("dims")).map_err(|e| ModelError::CheckpointMismatch(format!("dims: {e}")))?;
        let rvq_hash = meta.get("rvq_hash").and_then(|h| h.as_str()).unwrap_or_default().to_string();
        let actual = rvq.hash()?;
        if rvq_hash != actual {
            return Err(ModelError::CheckpointMismatch(format!(
                "trained against tokenizer {rvq_hash}, given {actual}"
            )));
        }
        config.validate()?;
        let mut store = ParamStore::from_archive(archive, "net.", true)?;
        let net = MctNet::new(&mut store, &config, &dims)?;
        let mct = Mct {
            seed: meta.get("seed").and_then(|v| v.as_u64()).unwrap_or(0),
            steps: meta.get("steps").and_then(|v| v.as_u64()).unwrap_or(0) as usize,
            config,
            dims,
            rvq_hash,
            net,
            store,
        };
        mct.check_rvq(rvq)?;
        Ok(mct)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_archive()?.write(path)?)
    }

    pub fn load(path: &Path, rvq: &Rvq) -> Result<Self> {
        Self::from_archive(&TensorArchive::read(path)?, rvq)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(hash_bytes(&self.to_archive()?.to_bytes()?))
    }
}

/// Errors unless `rvq` was built with `expected`.
pub fn check_rvq_config(rvq: &Rvq, expected: &RvqConfig) -> Result<()> {
    if &rvq.config != expected {
        return Err(ModelError::CheckpointMismatch(format!(
            "tokenizer config {:?} differs from the expected {:?}",
            rvq.config, expected
        )));
    }
    Ok(())
}

/// Per-clip training arrays, cut to a whole number of tokens.
struct ClipData {
    len: usize,
    tokens: Vec<Vec<usize>>,
    x: Vec<f32>,
    k: Vec<f32>,
    positions: Vec<f32>,
    contacts: Vec<f32>,
    bundle: ConditionBundle,
}

fn prepare_clip(s: &DanceSample, rvq: &Rvq, skeleton: &SkeletonTemplate) -> Result<ClipData> {
    let r = rvq.config.downsample;
    let frames = s.frames() / r * r;
    if frames < r {
        return Err(ModelError::InvalidConfig(format!("clip {} is shorter than r = {r}", s.id)));
    }
    let clip = s.slice(0, frames, s.id.clone());
    let tokens = rvq.tokenize(&clip.motion)?;
    let positions = host_fk(&clip.motion, skeleton)?;
    Ok(ClipData {
        len: tokens.len,
        tokens: tokens.ids,
        x: rvq.motion_norm.apply(&clip.motion.to_rows()),
        k: rvq.keypoint_norm.apply(&clip.keypoints.to_rows()),
        positions: positions.data.iter().flat_map(|p| [p.x as f32, p.y as f32, p.z as f32]).collect(),
        contacts: clip.motion.contacts.iter().flat_map(|c| c.map(|b| if b { 1.0 } else { 0.0 })).collect(),
        bundle: ConditionBundle::from_sample(&clip),
    })
}

/// Trains on the manifest's train split against a frozen tokenizer.
pub fn train_mct(
    manifest: &DatasetManifest,
    rvq: &Rvq,
    cfg: &MctConfig,
    seed: u64,
    skeleton: &SkeletonTemplate,
    on_step: impl FnMut(&MctLogRow),
) -> Result<(Mct, Vec<MctLogRow>)> {
    let samples: Vec<DanceSample> = manifest
        .split(Split::Train)
        .map(|e| manifest.load_sample(e))
        .collect::<std::result::Result<_, _>>()?;
    train_mct_on(&samples, rvq, cfg, seed, skeleton, on_step)
}

/// Each step picks the base objective with probability `base_prob`,
/// otherwise a deeper layer uniformly. Base batches draw a mask ratio
/// `cos(pi u / 2)` per clip and full condition sampling; deeper
/// batches only drop whole streams.
pub fn train_mct_on(
    samples: &[DanceSample],
    rvq: &Rvq,
    cfg: &MctConfig,
    seed: u64,
    skeleton: &SkeletonTemplate,
    mut on_step: impl FnMut(&MctLogRow),
) -> Result<(Mct, Vec<MctLogRow>)> {
    cfg.validate()?;
    let first = samples.first().ok_or(ModelError::EmptyDataset)?;
    let dims = MctDims::new(&rvq.config, first.music.dim, first.text.len());
    let clips: Vec<ClipData> = samples.iter().map(|s| prepare_clip(s, rvq, skeleton)).collect::<Result<_>>()?;
    let r = dims.downsample;
    let shortest = clips.iter().map(|c| c.len).min().unwrap_or(0);
    let window = if cfg.window == 0 { shortest } else { (cfg.window / r).clamp(1, shortest) };
    if window > cfg.max_positions {
        return Err(ModelError::InvalidConfig(format!(
            "{window} training tokens exceed max_positions {}",
            cfg.max_positions
        )));
    }
    let mut model = Mct::new(cfg, dims, seed, rvq.hash()?)?;
    let mut opt = AdamW::new(
        model.store.vars(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let norms = CondNorms::from_rvq(rvq);
    let device = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4d43_5421);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps);
    let frames = window * r;
    let drop_only = MctConfig { p_k: 0.0, p_g: 0.0, ..cfg.clone() };

    for step in 0..cfg.steps {
        let kind = if dims.rvq_layers == 1 || rng.random_bool(cfg.base_prob) {
            StepKind::Base
        } else {
            StepKind::Layer(rng.random_range(2..=dims.rvq_layers))
        };
        let b = cfg.batch_size;
        let mut pooled = Vec::with_capacity(b);
        let mut tokens = vec![Vec::with_capacity(b * window); dims.rvq_layers];
        let mut inputs = Vec::with_capacity(b * window);
        let mut mask = Vec::with_capacity(b * window);
        let (mut xs, mut ks, mut ps, mut cs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for _ in 0..b {
            if order.is_empty() {
                order = (0..clips.len()).collect();
                order.shuffle(&mut rng);
            }
            let c = &clips[order.pop().unwrap()];
            let o = if c.len > window { rng.random_range(0..=c.len - window) } else { 0 };
            let span = o * r..(o + window) * r;
            let bundle = c.bundle.slice(span.start, span.end);
            let (bundle, masks) = match kind {
                StepKind::Base => sample_condition_combo(&bundle, cfg, r, &mut rng),
                StepKind::Layer(_) => sample_condition_combo(&bundle, &drop_only, r, &mut rng),
            };
            pooled.push(pool_conditions(&bundle, &masks, &dims, &norms)?);
            for (l, ids) in c.tokens.iter().enumerate() {
                tokens[l].extend_from_slice(&ids[o..o + window]);
            }
            match kind {
                StepKind::Base => {
                    let ratio = (FRAC_PI_2 * rng.random::<f64>()).cos();
                    let (masked, where_) = mask_tokens(&c.tokens[0][o..o + window], ratio, dims.mask_id(), &mut rng);
                    let mut m = vec![false; window];
                    where_.iter().for_each(|&p| m[p] = true);
                    inputs.extend(masked);
                    mask.extend(m);
                }
                StepKind::Layer(n) => {
                    inputs.extend_from_slice(&c.tokens[n - 2][o..o + window]);
                    mask.extend(std::iter::repeat_n(true, window));
                }
            }
            if kind == StepKind::Base && cfg.decoder_supervised() {
                xs.extend_from_slice(&c.x[span.start * POSE_WIDTH..span.end * POSE_WIDTH]);
                ks.extend_from_slice(&c.k[span.start * KEYPOINT_WIDTH..span.end * KEYPOINT_WIDTH]);
                ps.extend_from_slice(&c.positions[span.start * NUM_JOINTS * 3..span.end * NUM_JOINTS * 3]);
                cs.extend_from_slice(&c.contacts[span.start * NUM_FOOT_POINTS..span.end * NUM_FOOT_POINTS]);
            }
        }
        let cond = model.net.conditions(&pooled)?;
        let logits = match kind {
            StepKind::Base => model.net.forward_base(&inputs, &cond)?,
            StepKind::Layer(n) => model.net.forward_layer(&inputs, n, &cond)?,
        };
        let decoder = if xs.is_empty() {
            None
        } else {
            let channels = |v: Vec<f32>, w: usize| -> Result<Tensor> {
                Ok(Tensor::from_vec(v, (b, frames, w), &device)?.transpose(1, 2)?.contiguous()?)
            };
            Some(DecoderTargets {
                x: channels(xs, POSE_WIDTH)?,
                k: channels(ks, KEYPOINT_WIDTH)?,
                positions: Tensor::from_vec(ps, (b, frames, NUM_JOINTS, 3), &device)?,
                contacts: Tensor::from_vec(cs, (b, frames, NUM_FOOT_POINTS), &device)?,
            })
        };
        let batch = LossBatch {
            kind,
            batch: b,
            len: window,
            tokens,
            mask,
            decoder,
        };
        let loss = mct_loss(rvq, &batch, &logits, cfg, skeleton)?;
        let total = scalar(&loss.total)?;
        if !total.is_finite() {
            return Err(ModelError::NonFinite(format!("mct loss at step {step}")));
        }
        opt.backward_step(&loss.total)?;
        let row = MctLogRow {
            step,
            kind: match kind {
                StepKind::Base => "base".into(),
                StepKind::Layer(n) => format!("layer{n}"),
            },
            ce_mask: scalar(&loss.ce_mask)?,
            ce_layer: scalar(&loss.ce_layer)?,
            rec: scalar(&loss.rec)?,
            gp: scalar(&loss.gp)?,
            kpts: scalar(&loss.kpts)?,
            fk: scalar(&loss.fk)?,
            contact: scalar(&loss.contact)?,
            total,
        };
        on_step(&row);
        log.push(row);
    }

    model.store.freeze();
    model.net = MctNet::new(&mut model.store, cfg, &dims)?;
    model.steps = cfg.steps;
    Ok((model, log))
}
