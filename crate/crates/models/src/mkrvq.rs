//! Motion tokenizer: a temporal conv encoder, residual quantization, a
//! motion decoder fed the sum of all layers and a keypoint decoder fed
//! layer 1 alone.

use std::ops::Range;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use choreo_core::dataset::{DanceSample, DatasetManifest, Split};
use choreo_core::motion::{Keypoints2DSequence, MotionSequence, KEYPOINT_WIDTH, POSE_WIDTH, ROTATION_WIDTH};
use choreo_core::tensor_file::TensorArchive;

use crate::error::{ModelError, Result};
use crate::nn::{bce_with_logits, gelu, l1, scalar, Conv1d, ParamStore, Scope};
use crate::quantizer::{quantize_residual, Codebook, LatentSequence, Quantized, TokenSequence};

pub const RVQ_SCHEMA_VERSION: u32 = 1;
/// Contact logits occupy the last four pose channels.
pub const CONTACT_CHANNELS: Range<usize> = ROTATION_WIDTH + 3..POSE_WIDTH;
/// Continuous pose channels: rotations and root translation.
pub const CONTINUOUS_WIDTH: usize = ROTATION_WIDTH + 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RvqConfig {
    /// Number of residual layers N.
    pub layers: usize,
    /// Entries per codebook k.
    pub codebook_size: usize,
    /// Latent width d.
    pub latent_dim: usize,
    /// Temporal downsampling r; a power of two.
    pub downsample: usize,
    /// Conv channel width inside encoder and decoders.
    pub hidden: usize,
    pub lambda_vel: f64,
    pub lambda_kpts: f64,
    pub lambda_commit: f64,
    pub ema_decay: f64,
    /// Entries whose usage average drops below this are re-seeded.
    pub dead_code_threshold: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Training crop length in frames; 0 uses the shortest clip.
    pub window: usize,
}

impl Default for RvqConfig {
    fn default() -> Self {
        RvqConfig {
            layers: 4,
            codebook_size: 512,
            latent_dim: 256,
            downsample: 4,
            hidden: 256,
            lambda_vel: 0.5,
            lambda_kpts: 1.0,
            lambda_commit: 0.02,
            ema_decay: 0.99,
            dead_code_threshold: 0.05,
            steps: 2000,
            batch_size: 8,
            learning_rate: 2e-3,
            window: 0,
        }
    }
}

impl RvqConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.layers < 1 || self.codebook_size < 2 || self.latent_dim < 1 || self.hidden < 1 {
            return bad(format!("rvq needs N >= 1, k >= 2, d >= 1, hidden >= 1: {self:?}"));
        }
        if !self.downsample.is_power_of_two() {
            return bad(format!("downsample rate {} must be a power of two", self.downsample));
        }
        let weights = [self.lambda_vel, self.lambda_kpts, self.lambda_commit, self.learning_rate];
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return bad("loss weights and learning rate must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) || self.batch_size < 1 {
            return bad("ema_decay must be in [0, 1) and batch_size >= 1".into());
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }
}

/// Per-channel affine normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalizer {
    /// Statistics of `rows` (row-major, `width` channels). Channels in `skip`
    /// keep mean 0 and std 1; the others get std floored at `floor`.
    pub fn fit(rows: &[f32], width: usize, floor: f32, skip: Range<usize>) -> Self {
        let n = (rows.len() / width).max(1) as f64;
        let mut mean = vec![0.0f64; width];
        for r in rows.chunks_exact(width) {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += *v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0f64; width];
        for r in rows.chunks_exact(width) {
            for c in 0..width {
                var[c] += (r[c] as f64 - mean[c]).powi(2);
            }
        }
        let mut out = Normalizer {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std: var.iter().map(|&v| ((v / n).sqrt() as f32).max(floor)).collect(),
        };
        for c in skip {
            out.mean[c] = 0.0;
            out.std[c] = 1.0;
        }
        out
    }

    pub fn identity(width: usize) -> Self {
        Normalizer {
            mean: vec![0.0; width],
            std: vec![1.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, rows: &[f32]) -> Vec<f32> {
        let w = self.width();
        rows.iter().enumerate().map(|(i, v)| (v - self.mean[i % w]) / self.std[i % w]).collect()
    }

    pub fn invert(&self, rows: &[f32]) -> Vec<f32> {
        let w = self.width();
        rows.iter().enumerate().map(|(i, v)| v * self.std[i % w] + self.mean[i % w]).collect()
    }

    /// `(1, width, 1)` tensors for un-normalizing `(batch, width, time)` data.
    pub fn tensors(&self, device: &Device) -> Result<(Tensor, Tensor)> {
        let w = self.width();
        Ok((
            Tensor::from_slice(&self.mean, (1, w, 1), device)?,
            Tensor::from_slice(&self.std, (1, w, 1), device)?,
        ))
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    a: Conv1d,
    b: Conv1d,
}

impl ResBlock {
    fn new(vb: &mut Scope, c: usize) -> Result<Self> {
        Ok(ResBlock {
            a: Conv1d::new(&mut vb.pp("a"), c, c, 3, 1, 1)?,
            b: Conv1d::new(&mut vb.pp("b"), c, c, 1, 1, 0)?,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x + self.b.forward(&gelu(&self.a.forward(&gelu(x)?)?)?)?
    }
}

#[derive(Debug, Clone)]
struct Encoder {
    input: Conv1d,
    down: Vec<(Conv1d, ResBlock)>,
    output: Conv1d,
}

impl Encoder {
    fn new(vb: &mut Scope, c_in: usize, cfg: &RvqConfig) -> Result<Self> {
        let h = cfg.hidden;
        let mut down = Vec::new();
        for i in 0..cfg.depth() {
            let mut s = vb.pp(format!("down{i}"));
            down.push((Conv1d::new(&mut s.pp("conv"), h, h, 4, 2, 1)?, ResBlock::new(&mut s.pp("res"), h)?));
        }
        Ok(Encoder {
            input: Conv1d::new(&mut vb.pp("in"), c_in, h, 3, 1, 1)?,
            down,
            output: Conv1d::new(&mut vb.pp("out"), h, cfg.latent_dim, 3, 1, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = self.input.forward(x)?;
        for (conv, res) in &self.down {
            h = res.forward(&conv.forward(&gelu(&h)?)?)?;
        }
        self.output.forward(&gelu(&h)?)
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    input: Conv1d,
    up: Vec<(ResBlock, Conv1d)>,
    output: Conv1d,
}

impl Decoder {
    fn new(vb: &mut Scope, c_out: usize, cfg: &RvqConfig) -> Result<Self> {
        let h = cfg.hidden;
        let mut up = Vec::new();
        for i in 0..cfg.depth() {
            let mut s = vb.pp(format!("up{i}"));
            up.push((ResBlock::new(&mut s.pp("res"), h)?, Conv1d::new(&mut s.pp("conv"), h, h, 3, 1, 1)?));
        }
        Ok(Decoder {
            input: Conv1d::new(&mut vb.pp("in"), cfg.latent_dim, h, 3, 1, 1)?,
            up,
            output: Conv1d::new(&mut vb.pp("out"), h, c_out, 3, 1, 1)?,
        })
    }

    fn forward(&self, z: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = self.input.forward(z)?;
        for (res, conv) in &self.up {
            let h2 = res.forward(&h)?;
            let t = h2.dim(2)?;
            h = conv.forward(&gelu(&h2.upsample_nearest1d(2 * t)?)?)?;
        }
        self.output.forward(&gelu(&h)?)
    }
}

/// The three networks of the tokenizer.
#[derive(Debug, Clone)]
pub struct RvqNet {
    encoder: Encoder,
    motion_decoder: Decoder,
    keypoint_decoder: Decoder,
}

impl RvqNet {
    pub fn new(store: &mut ParamStore, cfg: &RvqConfig) -> Result<Self> {
        let mut vb = Scope::root(store);
        Ok(RvqNet {
            encoder: Encoder::new(&mut vb.pp("enc"), POSE_WIDTH, cfg)?,
            motion_decoder: Decoder::new(&mut vb.pp("dec"), POSE_WIDTH, cfg)?,
            keypoint_decoder: Decoder::new(&mut vb.pp("kdec"), KEYPOINT_WIDTH, cfg)?,
        })
    }

    /// `(batch, 151, T)` normalized motion to `(batch, d, T / r)`.
    pub fn encode(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.encoder.forward(x)
    }

    /// `(batch, d, T')` latent to `(batch, 151, T' r)`; contact channels are logits.
    pub fn decode_motion(&self, z: &Tensor) -> candle_core::Result<Tensor> {
        self.motion_decoder.forward(z)
    }

    /// `(batch, d, T')` layer-1 latent to `(batch, 34, T' r)` normalized keypoints.
    pub fn decode_keypoints(&self, z1: &Tensor) -> candle_core::Result<Tensor> {
        self.keypoint_decoder.forward(z1)
    }
}

/// Tokenizer loss terms, each a scalar tensor.
#[derive(Debug, Clone)]
pub struct RvqLoss {
    pub recon: Tensor,
    pub vel: Tensor,
    pub kpts: Tensor,
    pub commit: Tensor,
    pub total: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RvqWeights {
    pub vel: f64,
    pub kpts: f64,
    pub commit: f64,
}

impl From<&RvqConfig> for RvqWeights {
    fn from(c: &RvqConfig) -> Self {
        RvqWeights {
            vel: c.lambda_vel,
            kpts: c.lambda_kpts,
            commit: c.lambda_commit,
        }
    }
}

/// Mean-reduced tokenizer loss on `(batch, channels, time)` tensors. Velocities are
/// first differences along time. The commitment term compares each residual
/// `R^i` with its detached quantization `sg(z^i)`.
///
/// With `contact_logits`, the channels in [`CONTACT_CHANNELS`] of `x_pred`
/// are logits scored by binary cross-entropy instead of L1, and are left out
/// of the velocity term.
pub fn rvq_loss(
    x: &Tensor,
    x_pred: &Tensor,
    k: &Tensor,
    k_pred: &Tensor,
    residuals: &[Tensor],
    quantized: &[Tensor],
    w: RvqWeights,
    contact_logits: bool,
) -> Result<RvqLoss> {
    if x.dims() != x_pred.dims() || k.dims() != k_pred.dims() || residuals.len() != quantized.len() {
        return Err(ModelError::ShapeMismatch(format!(
            "x {:?}/{:?}, k {:?}/{:?}, {} residuals vs {} quantized",
            x.dims(),
            x_pred.dims(),
            k.dims(),
            k_pred.dims(),
            residuals.len(),
            quantized.len()
        )));
    }
    let frames = x.dim(D::Minus1)?;
    let (recon, xs, ps) = if contact_logits {
        let xs = x.narrow(1, 0, CONTINUOUS_WIDTH)?;
        let ps = x_pred.narrow(1, 0, CONTINUOUS_WIDTH)?;
        let c = CONTACT_CHANNELS;
        let bce = bce_with_logits(&x_pred.narrow(1, c.start, c.len())?, &x.narrow(1, c.start, c.len())?)?;
        // weight the two parts by channel share so the scale matches plain L1
        let recon = ((l1(&xs, &ps)? * (CONTINUOUS_WIDTH as f64 / POSE_WIDTH as f64))?
            + (bce * (c.len() as f64 / POSE_WIDTH as f64))?)?;
        (recon, xs, ps)
    } else {
        (l1(x, x_pred)?, x.clone(), x_pred.clone())
    };
    let vel = if frames > 1 {
        let dx = (xs.narrow(2, 1, frames - 1)? - xs.narrow(2, 0, frames - 1)?)?;
        let dp = (ps.narrow(2, 1, frames - 1)? - ps.narrow(2, 0, frames - 1)?)?;
        l1(&dx, &dp)?
    } else {
        Tensor::zeros((), x.dtype(), x.device())?
    };
    let kpts = l1(k, k_pred)?;
    let mut commit = Tensor::zeros((), x.dtype(), x.device())?;
    for (r, q) in residuals.iter().zip(quantized) {
        commit = (commit + (r - q.detach())?.sqr()?.mean_all()?)?;
    }
    let total = (((&recon + (&vel * w.vel)?)? + (&kpts * w.kpts)?)? + (&commit * w.commit)?)?;
    Ok(RvqLoss {
        recon,
        vel,
        kpts,
        commit,
        total,
    })
}

/// `zq` in the forward pass, identity gradient to `z` in the backward pass.
pub fn straight_through(z: &Tensor, zq: &Tensor) -> candle_core::Result<Tensor> {
    z + (zq - z)?.detach()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RvqLogRow {
    pub step: usize,
    pub recon: f64,
    pub vel: f64,
    pub kpts: f64,
    pub commit: f64,
    pub total: f64,
    /// Codebook entries re-seeded at this step, all layers.
    pub resets: usize,
}

/// A trained tokenizer with frozen weights.
pub struct Rvq {
    pub config: RvqConfig,
    pub seed: u64,
    pub steps: usize,
    pub net: RvqNet,
    pub codebooks: Vec<Codebook>,
    pub motion_norm: Normalizer,
    pub keypoint_norm: Normalizer,
    store: ParamStore,
}

/// Pads `rows` (`width` channels) by repeating the last frame up to a multiple of `r`.
fn pad_rows(rows: &[f32], width: usize, r: usize) -> (Vec<f32>, usize) {
    let frames = rows.len() / width;
    let padded = frames.div_ceil(r).max(1) * r;
    let mut out = rows.to_vec();
    let last = if frames > 0 { rows[(frames - 1) * width..].to_vec() } else { vec![0.0; width] };
    for _ in frames..padded {
        out.extend_from_slice(&last);
    }
    (out, padded)
}

/// `(frames, width)` rows to a `(1, width, frames)` tensor.
fn rows_to_tensor(rows: &[f32], width: usize, device: &Device) -> Result<Tensor> {
    let frames = rows.len() / width;
    Ok(Tensor::from_slice(rows, (1, frames, width), device)?.transpose(1, 2)?.contiguous()?)
}

/// `(1, width, frames)` tensor back to rows.
fn tensor_to_rows(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.squeeze(0)?.t()?.contiguous()?.flatten_all()?.to_vec1::<f32>()?)
}

fn latent_to_tensor(z: &LatentSequence, device: &Device) -> Result<Tensor> {
    rows_to_tensor(&z.values, z.dim, device)
}

impl Rvq {
    pub fn frames_for(&self, latent_len: usize) -> usize {
        latent_len * self.config.downsample
    }

    /// Latents of a motion; `T` is padded to a multiple of `r` by repeating the last frame.
    pub fn encode(&self, motion: &MotionSequence) -> Result<LatentSequence> {
        let rows = self.motion_norm.apply(&motion.to_rows());
        let (rows, _) = pad_rows(&rows, POSE_WIDTH, self.config.downsample);
        let z = self.net.encode(&rows_to_tensor(&rows, POSE_WIDTH, &Device::Cpu)?)?;
        let values = tensor_to_rows(&z)?;
        Ok(LatentSequence {
            len: values.len() / self.config.latent_dim,
            dim: self.config.latent_dim,
            values,
        })
    }

    pub fn quantize(&self, z: &LatentSequence) -> Result<Quantized> {
        quantize_residual(z, &self.codebooks)
    }

    pub fn tokenize(&self, motion: &MotionSequence) -> Result<TokenSequence> {
        Ok(self.quantize(&self.encode(motion)?)?.tokens)
    }

    pub fn dequantize(&self, tokens: &TokenSequence, upto: usize) -> Result<LatentSequence> {
        crate::quantizer::dequantize(tokens, &self.codebooks, upto)
    }

    /// Decoded motion in raw units; contact logits are binarized at 0.
    pub fn decode_motion(&self, z: &LatentSequence, fps: f64) -> Result<MotionSequence> {
        let out = self.net.decode_motion(&latent_to_tensor(z, &Device::Cpu)?)?;
        let mut rows = self.motion_norm.invert(&tensor_to_rows(&out)?);
        for row in rows.chunks_exact_mut(POSE_WIDTH) {
            for c in &mut row[CONTACT_CHANNELS] {
                *c = if *c > 0.0 { 1.0 } else { 0.0 };
            }
        }
        Ok(MotionSequence::from_rows(&rows, fps)?)
    }

    /// Keypoints in pixels from the layer-1 latent only.
    pub fn decode_keypoints(&self, z1: &LatentSequence, fps: f64) -> Result<Keypoints2DSequence> {
        let out = self.net.decode_keypoints(&latent_to_tensor(z1, &Device::Cpu)?)?;
        let rows = self.keypoint_norm.invert(&tensor_to_rows(&out)?);
        Ok(Keypoints2DSequence::from_rows(&rows, fps)?)
    }

    /// Codebook `l` (0-based) as a `(k, d)` tensor.
    pub fn codebook_tensor(&self, l: usize) -> Result<Tensor> {
        let cb = &self.codebooks[l];
        Ok(Tensor::from_slice(&cb.entries, (cb.size(), cb.dim), &Device::Cpu)?)
    }

    /// Same tokenizer with every weight converted to `dtype`, for
    /// finite-difference checks in double precision.
    pub fn net_as(&self, dtype: DType) -> Result<RvqNet> {
        let mut archive = TensorArchive::default();
        self.store.write_into(&mut archive, "")?;
        let mut store = ParamStore::from_archive(&archive, "", true)?;
        store.cast(dtype)?;
        RvqNet::new(&mut store, &self.config)
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut archive = TensorArchive {
            meta: serde_json::json!({
                "schema_version": RVQ_SCHEMA_VERSION,
                "kind": "rvq",
                "config": self.config,
                "seed": self.seed,
                "steps": self.steps,
            }),
            tensors: Vec::new(),
        };
        self.store.write_into(&mut archive, "net.")?;
        for (l, cb) in self.codebooks.iter().enumerate() {
            let k = cb.size();
            archive.push(format!("codebook.{l}"), vec![k, cb.dim], cb.entries.clone());
            archive.push(format!("ema_count.{l}"), vec![k], cb.ema_counts.clone());
            archive.push(format!("ema_sum.{l}"), vec![k, cb.dim], cb.ema_sums.clone());
        }
        for (name, n) in [("motion", &self.motion_norm), ("keypoints", &self.keypoint_norm)] {
            archive.push(format!("norm.{name}.mean"), vec![n.width()], n.mean.clone());
            archive.push(format!("norm.{name}.std"), vec![n.width()], n.std.clone());
        }
        Ok(archive)
    }

    pub fn from_archive(archive: &TensorArchive) -> Result<Self> {
        let meta = &archive.meta;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("rvq") {
            return Err(ModelError::CheckpointMismatch("not a tokenizer checkpoint".into()));
        }
        let version = meta.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != RVQ_SCHEMA_VERSION {
            return Err(choreo_core::Error::SchemaVersion {
                found: version,
                expected: RVQ_SCHEMA_VERSION,
            }
            .into());
        }
        let config: RvqConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| ModelError::CheckpointMismatch(format!("config: {e}")))?;
        config.validate()?;
        let get = |name: &str| -> Result<Vec<f32>> {
            archive
                .get(name)
                .map(|(_, d)| d.to_vec())
                .ok_or_else(|| ModelError::CheckpointMismatch(format!("missing tensor `{name}`")))
        };
        let mut codebooks = Vec::new();
        for l in 0..config.layers {
            let mut cb = Codebook::new(l + 1, config.latent_dim, get(&format!("codebook.{l}"))?)?;
            cb.ema_counts = get(&format!("ema_count.{l}"))?;
            cb.ema_sums = get(&format!("ema_sum.{l}"))?;
            if cb.size() != config.codebook_size {
                return Err(ModelError::CheckpointMismatch(format!("codebook {l} has {} entries", cb.size())));
            }
            codebooks.push(cb);
        }
        let norm = |name: &str| -> Result<Normalizer> {
            Ok(Normalizer {
                mean: get(&format!("norm.{name}.mean"))?,
                std: get(&format!("norm.{name}.std"))?,
            })
        };
        let mut store = ParamStore::from_archive(archive, "net.", true)?;
        let net = RvqNet::new(&mut store, &config)?;
        Ok(Rvq {
            seed: meta.get("seed").and_then(|v| v.as_u64()).unwrap_or(0),
            steps: meta.get("steps").and_then(|v| v.as_u64()).unwrap_or(0) as usize,
            config,
            net,
            codebooks,
            motion_norm: norm("motion")?,
            keypoint_norm: norm("keypoints")?,
            store,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_archive()?.write(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&TensorArchive::read(path)?)
    }

    /// SHA-256 of the serialized checkpoint, hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(hash_bytes(&self.to_archive()?.to_bytes()?))
    }
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Normalized training arrays for one clip.
#[derive(Debug, Clone)]
pub struct ClipArrays {
    pub frames: usize,
    pub motion: Vec<f32>,
    pub keypoints: Vec<f32>,
}

pub fn fit_normalizers(samples: &[DanceSample]) -> (Normalizer, Normalizer) {
    let motion: Vec<f32> = samples.iter().flat_map(|s| s.motion.to_rows()).collect();
    let kpts: Vec<f32> = samples.iter().flat_map(|s| s.keypoints.to_rows()).collect();
    (
        Normalizer::fit(&motion, POSE_WIDTH, 0.05, CONTACT_CHANNELS),
        Normalizer::fit(&kpts, KEYPOINT_WIDTH, 5.0, 0..0),
    )
}

/// Trains on the manifest's train split.
pub fn train_rvq(
    manifest: &DatasetManifest,
    cfg: &RvqConfig,
    seed: u64,
    on_step: impl FnMut(&RvqLogRow),
) -> Result<(Rvq, Vec<RvqLogRow>)> {
    let samples: Vec<DanceSample> = manifest
        .split(Split::Train)
        .map(|e| manifest.load_sample(e))
        .collect::<std::result::Result<_, _>>()?;
    train_rvq_on(&samples, cfg, seed, on_step)
}

/// Training loop: AdamW on the networks, EMA plus dead-code reset on the
/// codebooks. Batch order and crops come from a ChaCha stream seeded with
/// `seed`, so reruns reproduce the loss curve.
pub fn train_rvq_on(
    samples: &[DanceSample],
    cfg: &RvqConfig,
    seed: u64,
    mut on_step: impl FnMut(&RvqLogRow),
) -> Result<(Rvq, Vec<RvqLogRow>)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let r = cfg.downsample;
    let shortest = samples.iter().map(|s| s.frames()).min().unwrap_or(0);
    let window = if cfg.window == 0 { shortest } else { cfg.window.min(shortest) } / r * r;
    if window < r {
        return Err(ModelError::InvalidConfig(format!("clips of {shortest} frames are shorter than r = {r}")));
    }
    let (motion_norm, keypoint_norm) = fit_normalizers(samples);
    let clips: Vec<ClipArrays> = samples
        .iter()
        .map(|s| ClipArrays {
            frames: s.frames(),
            motion: motion_norm.apply(&s.motion.to_rows()),
            keypoints: keypoint_norm.apply(&s.keypoints.to_rows()),
        })
        .collect();

    let device = Device::Cpu;
    let mut store = ParamStore::new(seed);
    let net = RvqNet::new(&mut store, cfg)?;
    let mut opt = AdamW::new(
        store.vars(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5251_5651);
    let mut codebooks: Vec<Codebook> = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps);
    let mut order: Vec<usize> = Vec::new();
    let t_lat = window / r;
    let d = cfg.latent_dim;

    for step in 0..cfg.steps {
        let mut xb = Vec::with_capacity(cfg.batch_size * window * POSE_WIDTH);
        let mut kb = Vec::with_capacity(cfg.batch_size * window * KEYPOINT_WIDTH);
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = (0..clips.len()).collect();
                order.shuffle(&mut rng);
            }
            let c = &clips[order.pop().unwrap()];
            let start = if c.frames > window { rng.random_range(0..=c.frames - window) } else { 0 };
            xb.extend_from_slice(&c.motion[start * POSE_WIDTH..(start + window) * POSE_WIDTH]);
            kb.extend_from_slice(&c.keypoints[start * KEYPOINT_WIDTH..(start + window) * KEYPOINT_WIDTH]);
        }
        let b = cfg.batch_size;
        let x = Tensor::from_vec(xb, (b, window, POSE_WIDTH), &device)?.transpose(1, 2)?.contiguous()?;
        let k = Tensor::from_vec(kb, (b, window, KEYPOINT_WIDTH), &device)?.transpose(1, 2)?.contiguous()?;

        let z = net.encode(&x)?;
        let z_host = LatentSequence {
            len: b * t_lat,
            dim: d,
            values: z.transpose(1, 2)?.contiguous()?.flatten_all()?.to_vec1::<f32>()?,
        };
        if codebooks.is_empty() {
            codebooks = init_codebooks(&z_host, cfg, &mut rng)?;
        }
        let q = quantize_residual(&z_host, &codebooks)?;
        let to_t = |v: &[f32]| -> candle_core::Result<Tensor> {
            Tensor::from_slice(v, (b, t_lat, d), &device)?.transpose(1, 2)?.contiguous()
        };
        // cumulative sums of the quantized layers
        let mut cum = vec![0.0f32; z_host.values.len()];
        let mut residuals = Vec::with_capacity(cfg.layers);
        let mut quantized = Vec::with_capacity(cfg.layers);
        for layer in &q.quantized {
            // R^l = z - sum_{i<l} z^i carries the encoder gradient
            residuals.push((&z - to_t(&cum)?)?);
            quantized.push(to_t(&layer.values)?);
            cum.iter_mut().zip(&layer.values).for_each(|(c, v)| *c += v);
        }
        let zq = to_t(&cum)?;
        let z1 = to_t(&q.quantized[0].values)?;
        let z_st = straight_through(&z, &zq)?;
        let z1_st = straight_through(&z, &z1)?;
        let x_pred = net.decode_motion(&z_st)?;
        let k_pred = net.decode_keypoints(&z1_st)?;
        let loss = rvq_loss(&x, &x_pred, &k, &k_pred, &residuals, &quantized, cfg.into(), true)?;
        let total = scalar(&loss.total)?;
        if !total.is_finite() {
            return Err(ModelError::NonFinite(format!("rvq loss at step {step}")));
        }
        opt.backward_step(&loss.total)?;

        let mut resets = 0;
        for (l, cb) in codebooks.iter_mut().enumerate() {
            cb.ema_update(&q.residuals[l].values, &q.tokens.ids[l], cfg.ema_decay as f32);
            resets += cb.reset_dead(&q.residuals[l].values, cfg.dead_code_threshold as f32, &mut rng);
        }
        let row = RvqLogRow {
            step,
            recon: scalar(&loss.recon)?,
            vel: scalar(&loss.vel)?,
            kpts: scalar(&loss.kpts)?,
            commit: scalar(&loss.commit)?,
            total,
            resets,
        };
        on_step(&row);
        log.push(row);
    }

    if codebooks.is_empty() {
        // zero steps: seed the codebooks from one pass over the data
        let x = rows_to_tensor(&clips[0].motion[..window * POSE_WIDTH], POSE_WIDTH, &device)?;
        let values = tensor_to_rows(&net.encode(&x)?)?;
        codebooks = init_codebooks(&LatentSequence { len: values.len() / d, dim: d, values }, cfg, &mut rng)?;
    }
    let mut store = store;
    store.freeze();
    let net = RvqNet::new(&mut store, cfg)?;
    Ok((
        Rvq {
            config: cfg.clone(),
            seed,
            steps: cfg.steps,
            net,
            codebooks,
            motion_norm,
            keypoint_norm,
            store,
        },
        log,
    ))
}

/// Seeds each layer from the residuals left by the layers before it,
/// sampling batch vectors with replacement plus a little noise.
fn init_codebooks(z: &LatentSequence, cfg: &RvqConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Codebook>> {
    let mut books: Vec<Codebook> = Vec::with_capacity(cfg.layers);
    let mut residual = z.clone();
    for l in 0..cfg.layers {
        let mut entries = Vec::with_capacity(cfg.codebook_size * z.dim);
        for _ in 0..cfg.codebook_size {
            let src = rng.random_range(0..residual.len);
            entries.extend(residual.row(src).iter().map(|v| v + 1e-3 * (rng.random::<f32>() - 0.5)));
        }
        let cb = Codebook::new(l + 1, z.dim, entries)?;
        residual = quantize_residual(&residual, std::slice::from_ref(&cb))?.residuals.pop().unwrap();
        books.push(cb);
    }
    Ok(books)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64], shape: (usize, usize, usize)) -> Tensor {
        Tensor::from_slice(v, shape, &Device::Cpu).unwrap()
    }

    fn zero_weights() -> RvqWeights {
        RvqWeights { vel: 0.0, kpts: 0.0, commit: 0.0 }
    }

    #[test]
    fn perfect_reconstruction_costs_nothing() {
        let x = t(&[0.5, -1.0, 2.0, 0.0, 1.5, 3.0], (1, 2, 3));
        let k = t(&[10.0, 20.0], (1, 1, 2));
        let r = t(&[0.3, -0.2], (1, 2, 1));
        let w = RvqWeights { vel: 0.5, kpts: 1.0, commit: 0.02 };
        let loss = rvq_loss(&x, &x, &k, &k, &[r.clone()], &[r], w, false).unwrap();
        assert_eq!(scalar(&loss.total).unwrap(), 0.0);
    }

    #[test]
    fn commitment_matches_one_dimensional_toy() {
        // residuals 0.9 and -0.1 against entries 1 and -0.1
        let x = t(&[0.0], (1, 1, 1));
        let residuals = [t(&[0.9], (1, 1, 1)), t(&[-0.1], (1, 1, 1))];
        let quantized = [t(&[1.0], (1, 1, 1)), t(&[-0.1], (1, 1, 1))];
        let w = RvqWeights { vel: 0.0, kpts: 0.0, commit: 1.0 };
        let loss = rvq_loss(&x, &x, &x, &x, &residuals, &quantized, w, false).unwrap();
        assert!((scalar(&loss.total).unwrap() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_leave_plain_l1() {
        let x = t(&[0.0, 1.0, 2.0, 3.0], (1, 2, 2));
        let p = t(&[1.0, 1.0, 0.0, 3.5], (1, 2, 2));
        let k = t(&[0.0, 0.0], (1, 1, 2));
        let kp = t(&[5.0, 5.0], (1, 1, 2));
        let r = [t(&[4.0], (1, 1, 1))];
        let q = [t(&[0.0], (1, 1, 1))];
        let loss = rvq_loss(&x, &p, &k, &kp, &r, &q, zero_weights(), false).unwrap();
        assert!((scalar(&loss.total).unwrap() - 3.5 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn contact_channels_use_cross_entropy() {
        let frames = 2;
        let mut xv = vec![0.0; POSE_WIDTH * frames];
        let mut pv = vec![0.0; POSE_WIDTH * frames];
        // channel-major layout: (1, 151, frames)
        xv[0] = 1.0;
        for c in CONTACT_CHANNELS {
            xv[c * frames] = 1.0;
            pv[c * frames] = 2.0;
            pv[c * frames + 1] = -1.0;
        }
        let x = t(&xv, (1, POSE_WIDTH, frames));
        let p = t(&pv, (1, POSE_WIDTH, frames));
        let k = t(&[0.0], (1, 1, 1));
        let loss = rvq_loss(&x, &p, &k, &k, &[], &[], zero_weights(), true).unwrap();
        let bce = |logit: f64, y: f64| logit.max(0.0) - logit * y + (1.0 + (-logit.abs()).exp()).ln();
        let l1 = 1.0 / (CONTINUOUS_WIDTH * frames) as f64;
        let ce = (bce(2.0, 1.0) + bce(-1.0, 0.0)) / 2.0;
        let want = l1 * CONTINUOUS_WIDTH as f64 / POSE_WIDTH as f64 + ce * 4.0 / POSE_WIDTH as f64;
        assert!((scalar(&loss.recon).unwrap() - want).abs() < 1e-12);
        // the contact jump from 1 to 0 does not reach the velocity term
        let vel = 1.0 / (CONTINUOUS_WIDTH as f64);
        assert!((scalar(&loss.vel).unwrap() - vel).abs() < 1e-12);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let a = t(&[0.0, 0.0], (1, 1, 2));
        let b = t(&[0.0], (1, 1, 1));
        let err = rvq_loss(&a, &b, &a, &a, &[], &[], zero_weights(), false).unwrap_err();
        assert!(matches!(err, ModelError::ShapeMismatch(_)));
    }

    #[test]
    fn straight_through_forwards_quantized_and_passes_identity_gradient() {
        let z = candle_core::Var::from_slice(&[0.2f64, -0.7], (2,), &Device::Cpu).unwrap();
        let zq = Tensor::from_slice(&[0.0f64, -1.0], (2,), &Device::Cpu).unwrap();
        let y = straight_through(z.as_tensor(), &zq).unwrap();
        assert_eq!(y.to_vec1::<f64>().unwrap(), vec![0.0, -1.0]);
        let g = (y.sqr().unwrap().sum_all().unwrap()).backward().unwrap();
        // d/dz sum(y^2) = 2 y, evaluated at the quantized value
        assert_eq!(g.get(z.as_tensor()).unwrap().to_vec1::<f64>().unwrap(), vec![0.0, -2.0]);
    }

    #[test]
    fn padding_repeats_last_frame() {
        let (rows, frames) = pad_rows(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 2, 4);
        assert_eq!(frames, 4);
        assert_eq!(rows, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 5.0, 6.0]);
        assert_eq!(pad_rows(&[1.0; 8], 2, 4).1, 4);
    }

    #[test]
    fn normalizer_round_trips_and_skips() {
        let rows = [1.0f32, 5.0, 0.0, 3.0, 5.0, 1.0, 5.0, 5.0, 1.0];
        let n = Normalizer::fit(&rows, 3, 0.1, 2..3);
        assert_eq!(n.mean, vec![3.0, 5.0, 0.0]);
        assert!((n.std[0] - (8.0f32 / 3.0).sqrt()).abs() < 1e-6);
        assert_eq!(n.std[1], 0.1);
        assert_eq!(n.std[2], 1.0);
        let back = n.invert(&n.apply(&rows));
        for (a, b) in rows.iter().zip(&back) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn config_validation() {
        assert!(RvqConfig::default().validate().is_ok());
        assert_eq!(RvqConfig::default().depth(), 2);
        for bad in [
            RvqConfig { layers: 0, ..Default::default() },
            RvqConfig { codebook_size: 1, ..Default::default() },
            RvqConfig { downsample: 3, ..Default::default() },
            RvqConfig { lambda_vel: -1.0, ..Default::default() },
            RvqConfig { ema_decay: 1.0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(ModelError::InvalidConfig(_))), "{bad:?}");
        }
    }
}
