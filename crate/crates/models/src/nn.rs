//! Parameter storage and the handful of layers both models use.
//!
//! Parameters live in a name-ordered map and are initialized from a seeded
//! ChaCha stream, so the same seed always yields the same weights. Layers
//! only hold plain tensors: built from a trainable store they carry
//! gradients, built from a loaded checkpoint they are frozen.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{ModelError, Result};
use choreo_core::tensor_file::TensorArchive;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    FanIn(usize),
    Normal(f64),
    Const(f64),
}

pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    device: Device,
    frozen: bool,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            device: Device::Cpu,
            frozen: false,
        }
    }

    /// Loads every tensor under `prefix` from an archive. A frozen store hands
    /// out detached tensors and refuses to create new parameters.
    pub fn from_archive(archive: &TensorArchive, prefix: &str, frozen: bool) -> Result<Self> {
        let device = Device::Cpu;
        let mut vars = BTreeMap::new();
        for (name, shape, data) in &archive.tensors {
            if let Some(rest) = name.strip_prefix(prefix) {
                let t = Tensor::from_slice(data, shape.as_slice(), &device)?;
                vars.insert(rest.to_string(), Var::from_tensor(&t)?);
            }
        }
        Ok(ParamStore {
            vars,
            rng: ChaCha8Rng::seed_from_u64(0),
            device,
            frozen,
        })
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(ModelError::CheckpointMismatch(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    v.dims()
                )));
            }
            return Ok(if self.frozen { v.as_tensor().detach() } else { v.as_tensor().clone() });
        }
        if self.frozen {
            return Err(ModelError::CheckpointMismatch(format!("missing parameter `{name}`")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-bound..bound) as f32).collect()
            }
            Init::Normal(std) => (0..n).map(|_| (std * self.rng.sample::<f64, _>(StandardNormal)) as f32).collect(),
            Init::Const(c) => vec![c as f32; n],
        };
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &self.device)?)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(t)
    }

    /// Later `get` calls hand out detached tensors.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn cast(&mut self, dtype: DType) -> Result<()> {
        for v in self.vars.values_mut() {
            *v = Var::from_tensor(&v.as_tensor().to_dtype(dtype)?)?;
        }
        Ok(())
    }

    /// Trainable variables in name order.
    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn write_into(&self, archive: &mut TensorArchive, prefix: &str) -> Result<()> {
        for (name, v) in &self.vars {
            let data = v.as_tensor().flatten_all()?.to_vec1::<f32>()?;
            archive.push(format!("{prefix}{name}"), v.dims().to_vec(), data);
        }
        Ok(())
    }
}

/// Scoped view of a store: `vb.pp("enc").get("w", ..)` names the parameter `enc.w`.
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn root(store: &'a mut ParamStore) -> Self {
        Scope { store, prefix: String::new() }
    }

    pub fn pp(&mut self, name: impl std::fmt::Display) -> Scope<'_> {
        Scope {
            prefix: format!("{}{name}.", self.prefix),
            store: &mut *self.store,
        }
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.store.get(&format!("{}{name}", self.prefix), shape, init)
    }

    pub fn device(&self) -> Device {
        self.store.device().clone()
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    pub fn new(vb: &mut Scope, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Linear {
            w: vb.get("w", &[d_out, d_in], Init::FanIn(d_in))?,
            b: vb.get("b", &[d_out], Init::FanIn(d_in))?,
        })
    }

    pub fn out_dim(&self) -> candle_core::Result<usize> {
        self.w.dim(0)
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        // flattened to 2-D: matmul against a broadcast batch is unreliable
        let mut dims = x.dims().to_vec();
        let d_in = dims.pop().unwrap_or(1);
        let rows = x.reshape(((), d_in))?;
        let y = rows.matmul(&self.w.t()?)?.broadcast_add(&self.b)?;
        dims.push(self.w.dim(0)?);
        y.reshape(dims)
    }
}

/// 1-D convolution over `(batch, channels, time)`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    w: Tensor,
    b: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv1d {
    pub fn new(vb: &mut Scope, c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        let fan_in = c_in * kernel;
        Ok(Conv1d {
            w: vb.get("w", &[c_out, c_in, kernel], Init::FanIn(fan_in))?,
            b: vb.get("b", &[c_out], Init::FanIn(fan_in))?,
            stride,
            padding,
        })
    }
}

impl Module for Conv1d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        conv1d(x, &self.w, self.stride, self.padding)?.broadcast_add(&self.b.reshape((1, (), 1))?)
    }
}

/// `(B, C_in, T)` with `w` of shape `(C_out, C_in, k)`, as unfold plus matmul.
/// candle's native conv1d returns a wrong weight gradient, this form only
/// uses primitives whose backward passes are exact.
pub fn conv1d(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> candle_core::Result<Tensor> {
    let (b, c_in, t) = x.dims3()?;
    let (c_out, _, k) = w.dims3()?;
    if t + 2 * padding < k {
        candle_core::bail!("conv1d input of {t} frames is shorter than the kernel {k}");
    }
    let t_out = (t + 2 * padding - k) / stride + 1;
    // right pad so every tap can take `stride * t_out` frames and reshape
    let need = (k - 1) + stride * t_out;
    let right = need.saturating_sub(t + padding);
    let xp = x.pad_with_zeros(2, padding, right)?;
    let mut taps = Vec::with_capacity(k);
    for j in 0..k {
        let tap = xp.narrow(2, j, stride * t_out)?;
        let tap = if stride == 1 {
            tap
        } else {
            tap.reshape((b, c_in, t_out, stride))?.narrow(3, 0, 1)?.squeeze(3)?
        };
        taps.push(tap);
    }
    // (B, C_in, k, T_out) flattened to match the weight layout
    let cols = Tensor::stack(&taps, 2)?
        .reshape((b, c_in * k, t_out))?
        .transpose(1, 2)?
        .reshape((b * t_out, c_in * k))?;
    let w2 = w.reshape((c_out, c_in * k))?.t()?;
    cols.matmul(&w2)?.reshape((b, t_out, c_out))?.transpose(1, 2)?.contiguous()
}

/// Layer norm over the last axis, written with primitive ops so it is differentiable.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    g: Tensor,
    b: Tensor,
}

impl LayerNorm {
    pub fn new(vb: &mut Scope, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            g: vb.get("g", &[dim], Init::Const(1.0))?,
            b: vb.get("b", &[dim], Init::Const(0.0))?,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        centered
            .broadcast_div(&(var + 1e-5)?.sqrt()?)?
            .broadcast_mul(&self.g)?
            .broadcast_add(&self.b)
    }
}

/// Pre-norm transformer block with full (bidirectional) self-attention.
#[derive(Debug, Clone)]
pub struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl Block {
    pub fn new(vb: &mut Scope, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(ModelError::InvalidConfig(format!("d_model {d} not divisible by {heads} heads")));
        }
        Ok(Block {
            ln1: LayerNorm::new(&mut vb.pp("ln1"), d)?,
            qkv: Linear::new(&mut vb.pp("qkv"), d, 3 * d)?,
            proj: Linear::new(&mut vb.pp("proj"), d, d)?,
            ln2: LayerNorm::new(&mut vb.pp("ln2"), d)?,
            fc1: Linear::new(&mut vb.pp("fc1"), d, 4 * d)?,
            fc2: Linear::new(&mut vb.pp("fc2"), 4 * d, d)?,
            heads,
        })
    }
}

impl Module for Block {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let hd = d / self.heads;
        let qkv = self.qkv.forward(&self.ln1.forward(x)?)?;
        let split = |i: usize| -> candle_core::Result<Tensor> {
            qkv.narrow(2, i * d, d)?
                .reshape((b, t, self.heads, hd))?
                .transpose(1, 2)?
                .contiguous()
        };
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let att = (q.matmul(&k.t()?.contiguous()?)? / (hd as f64).sqrt())?;
        let att = candle_nn::ops::softmax(&att, D::Minus1)?;
        let y = att.matmul(&v)?.transpose(1, 2)?.reshape((b, t, d))?;
        let x = (x + self.proj.forward(&y)?)?;
        let h = gelu(&self.fc1.forward(&self.ln2.forward(&x)?)?)?;
        x + self.fc2.forward(&h)?
    }
}

/// Mean absolute difference over all elements.
/// Tanh-approximate GELU composed from primitive ops. candle's fused
/// `gelu` differentiates with six-digit constants, which is visible in
/// finite-difference checks on trained weights.
pub fn gelu(x: &Tensor) -> candle_core::Result<Tensor> {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    let inner = ((x.sqr()? * 0.044715)? + 1.0)?.mul(x)?.affine(SQRT_2_OVER_PI, 0.0)?;
    (x * 0.5)?.mul(&(inner.tanh()? + 1.0)?)
}

pub fn l1(a: &Tensor, b: &Tensor) -> candle_core::Result<Tensor> {
    (a - b)?.abs()?.mean_all()
}

/// Mean binary cross-entropy of logits against {0, 1} targets, in the
/// stable `max(x, 0) - x y + log(1 + exp(-|x|))` form.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> candle_core::Result<Tensor> {
    let relu = logits.relu()?;
    let soft = ((logits.abs()?.neg()?.exp()? + 1.0)?).log()?;
    ((relu - (logits * targets)?)? + soft)?.mean_all()
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn gelu_matches_fused_forward_and_has_exact_gradient() {
        let xs: Vec<f64> = (-80..=80).map(|i| i as f64 / 10.0).collect();
        let x = Var::from_vec(xs.clone(), xs.len(), &Device::Cpu).unwrap();
        let ours = gelu(x.as_tensor()).unwrap();
        let fused = x.as_tensor().gelu().unwrap();
        let gap = (&ours - &fused).unwrap().abs().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap();
        assert!(gap < 1e-12, "{gap}");
        let g = ours.sum_all().unwrap().backward().unwrap().get(x.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        let f = |v: f64| 0.5 * v * (1.0 + (0.797_884_560_802_865_4 * (v + 0.044715 * v * v * v)).tanh());
        for (v, g) in xs.iter().zip(g) {
            let fd = (f(v + 1e-6) - f(v - 1e-6)) / 2e-6;
            assert!((fd - g).abs() < 1e-8, "x {v}: {fd} vs {g}");
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let (b, ci, co, t, k) = (2, 3, 4, 9, 4);
        for (stride, padding) in [(1, 1), (2, 1), (1, 0), (2, 0), (3, 2)] {
            let xv = lcg(b * ci * t, 1);
            let wv = lcg(co * ci * k, 2);
            let x = Tensor::from_vec(xv.clone(), (b, ci, t), &Device::Cpu).unwrap();
            let w = Tensor::from_vec(wv.clone(), (co, ci, k), &Device::Cpu).unwrap();
            let y = conv1d(&x, &w, stride, padding).unwrap();
            let t_out = (t + 2 * padding - k) / stride + 1;
            assert_eq!(y.dims(), &[b, co, t_out]);
            let got = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            for n in 0..b {
                for o in 0..co {
                    for u in 0..t_out {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for j in 0..k {
                                let src = (u * stride + j) as isize - padding as isize;
                                if src >= 0 && (src as usize) < t {
                                    acc += wv[(o * ci + c) * k + j] * xv[(n * ci + c) * t + src as usize];
                                }
                            }
                        }
                        let g = got[(n * co + o) * t_out + u];
                        assert!((g - acc).abs() < 1e-12, "stride {stride} pad {padding}: {g} vs {acc}");
                    }
                }
            }
        }
    }

    /// Max abs gap between autograd and central differences of `f` at `v`.
    fn fd_gap(v: &[f64], shape: &[usize], f: &dyn Fn(&Tensor) -> Tensor) -> f64 {
        let var = Var::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap();
        let grads = f(var.as_tensor()).backward().unwrap();
        let g = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let at = |w: Vec<f64>| f(&Tensor::from_vec(w, shape, &Device::Cpu).unwrap()).to_scalar::<f64>().unwrap();
        let mut gap = 0.0f64;
        for i in 0..v.len() {
            let mut p = v.to_vec();
            let mut m = v.to_vec();
            p[i] += 1e-6;
            m[i] -= 1e-6;
            gap = gap.max(((at(p) - at(m)) / 2e-6 - g[i]).abs());
        }
        gap
    }

    #[test]
    fn linear_and_block_gradients_match_finite_differences() {
        let build = |store: &mut ParamStore| {
            let mut vb = Scope::root(store);
            (Linear::new(&mut vb.pp("lin"), 6, 5).unwrap(), Block::new(&mut vb.pp("blk"), 6, 2).unwrap())
        };
        let mut store = ParamStore::new(7);
        build(&mut store);
        store.cast(DType::F64).unwrap();
        store.freeze();
        let (lin, block) = build(&mut store);
        let r = Tensor::from_vec(lcg(2 * 4 * 5, 9), (2, 4, 5), &Device::Cpu).unwrap();
        let r6 = Tensor::from_vec(lcg(2 * 4 * 6, 10), (2, 4, 6), &Device::Cpu).unwrap();
        let x = lcg(2 * 4 * 6, 11);
        let gap = fd_gap(&x, &[2, 4, 6], &|t| (lin.forward(t).unwrap() * &r).unwrap().sum_all().unwrap());
        assert!(gap < 1e-6, "linear {gap}");
        let gap = fd_gap(&x, &[2, 4, 6], &|t| (block.forward(t).unwrap() * &r6).unwrap().sum_all().unwrap());
        assert!(gap < 1e-6, "block {gap}");
    }

    #[test]
    fn conv_weight_gradient_matches_finite_differences() {
        let x = Tensor::from_vec(lcg(2 * 3 * 9, 3), (2, 3, 9), &Device::Cpu).unwrap();
        let wv = lcg(4 * 3 * 4, 4);
        let r = Tensor::from_vec(lcg(2 * 4 * 4, 5), (2, 4, 4), &Device::Cpu).unwrap();
        let f = |w: &Tensor| (conv1d(&x, w, 2, 1).unwrap() * &r).unwrap().sum_all().unwrap();
        let w = Var::from_vec(wv.clone(), (4, 3, 4), &Device::Cpu).unwrap();
        let grads = f(w.as_tensor()).backward().unwrap();
        let g = grads.get(w.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for i in 0..wv.len() {
            let mut p = wv.clone();
            let mut m = wv.clone();
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let at = |v: Vec<f64>| f(&Tensor::from_vec(v, (4, 3, 4), &Device::Cpu).unwrap()).to_scalar::<f64>().unwrap();
            let fd = (at(p) - at(m)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-6, "{i}: {fd} vs {}", g[i]);
        }
    }
}
