//! Residual vector quantization on plain host buffers.
//!
//! Each layer quantizes what the previous layers left over; the
//! reconstruction is the sum of the chosen entries. Nearest-neighbor search
//! is an exhaustive scan with ties going to the lowest index.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

/// `len x dim` latent vectors, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSequence {
    pub len: usize,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl LatentSequence {
    pub fn zeros(len: usize, dim: usize) -> Self {
        LatentSequence {
            len,
            dim,
            values: vec![0.0; len * dim],
        }
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }

    /// Mean over positions of the per-position Euclidean norm.
    pub fn mean_row_norm(&self) -> f64 {
        if self.len == 0 {
            return 0.0;
        }
        (0..self.len)
            .map(|t| self.row(t).iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt())
            .sum::<f64>()
            / self.len as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    /// 1-based layer index.
    pub layer: usize,
    pub dim: usize,
    /// `k x dim` entries, row-major.
    pub entries: Vec<f32>,
    /// Exponential moving average of per-batch assignment counts.
    pub ema_counts: Vec<f32>,
    /// Exponential moving average of the sum of assigned vectors, `k x dim`.
    pub ema_sums: Vec<f32>,
}

impl Codebook {
    pub fn new(layer: usize, dim: usize, entries: Vec<f32>) -> Result<Self> {
        if dim == 0 || entries.len() % dim != 0 || entries.len() / dim < 2 {
            return Err(ModelError::InvalidConfig(format!(
                "codebook needs at least 2 entries of width {dim}, got {} values",
                entries.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite(format!("codebook {layer} entries")));
        }
        let k = entries.len() / dim;
        Ok(Codebook {
            layer,
            dim,
            ema_sums: entries.clone(),
            ema_counts: vec![1.0; k],
            entries,
        })
    }

    pub fn size(&self) -> usize {
        self.entries.len() / self.dim
    }

    pub fn entry(&self, i: usize) -> &[f32] {
        &self.entries[i * self.dim..(i + 1) * self.dim]
    }

    /// Index of the entry closest to `v` in squared Euclidean distance.
    pub fn nearest(&self, v: &[f32]) -> usize {
        let mut best = (f32::INFINITY, 0);
        for i in 0..self.size() {
            let d: f32 = self.entry(i).iter().zip(v).map(|(c, x)| (x - c) * (x - c)).sum();
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    /// Folds one batch of assignments into the moving averages and moves
    /// each entry to its smoothed centroid.
    pub fn ema_update(&mut self, vectors: &[f32], ids: &[usize], decay: f32) {
        let k = self.size();
        let d = self.dim;
        let mut counts = vec![0.0f32; k];
        let mut sums = vec![0.0f32; k * d];
        for (n, &i) in ids.iter().enumerate() {
            counts[i] += 1.0;
            for c in 0..d {
                sums[i * d + c] += vectors[n * d + c];
            }
        }
        for i in 0..k {
            self.ema_counts[i] = decay * self.ema_counts[i] + (1.0 - decay) * counts[i];
        }
        for (s, new) in self.ema_sums.iter_mut().zip(&sums) {
            *s = decay * *s + (1.0 - decay) * new;
        }
        // Laplace smoothing keeps rarely used entries from dividing by ~0
        let total: f32 = self.ema_counts.iter().sum();
        let eps = 1e-5;
        for i in 0..k {
            let smoothed = (self.ema_counts[i] + eps) / (total + k as f32 * eps) * total;
            for c in 0..d {
                self.entries[i * d + c] = self.ema_sums[i * d + c] / smoothed;
            }
        }
    }

    /// Re-seeds every entry whose usage average fell below `threshold` from
    /// randomly chosen batch vectors. Returns how many were reset.
    pub fn reset_dead(&mut self, vectors: &[f32], threshold: f32, rng: &mut impl Rng) -> usize {
        let d = self.dim;
        let n = vectors.len() / d;
        if n == 0 {
            return 0;
        }
        let mut reset = 0;
        for i in 0..self.size() {
            if self.ema_counts[i] < threshold {
                let src = rng.random_range(0..n);
                self.entries[i * d..(i + 1) * d].copy_from_slice(&vectors[src * d..(src + 1) * d]);
                self.ema_sums[i * d..(i + 1) * d].copy_from_slice(&vectors[src * d..(src + 1) * d]);
                self.ema_counts[i] = 1.0;
                reset += 1;
            }
        }
        reset
    }

    /// Entries whose usage average is at least `threshold`.
    pub fn live_entries(&self, threshold: f32) -> usize {
        self.ema_counts.iter().filter(|&&c| c >= threshold).count()
    }
}

/// `layers x len` token ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub len: usize,
    pub ids: Vec<Vec<usize>>,
}

impl TokenSequence {
    pub fn layers(&self) -> usize {
        self.ids.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub tokens: TokenSequence,
    /// Chosen entries per layer.
    pub quantized: Vec<LatentSequence>,
    /// `R^1 = z` through `R^{N+1}`.
    pub residuals: Vec<LatentSequence>,
}

/// Quantizes through every codebook in order: `R^{l+1} = R^l - c_l[id]`.
pub fn quantize_residual(z: &LatentSequence, codebooks: &[Codebook]) -> Result<Quantized> {
    let mut residuals = vec![z.clone()];
    let mut quantized = Vec::with_capacity(codebooks.len());
    let mut ids = Vec::with_capacity(codebooks.len());
    for cb in codebooks {
        if cb.dim != z.dim {
            return Err(ModelError::ShapeMismatch(format!("codebook {} width {} vs latent {}", cb.layer, cb.dim, z.dim)));
        }
        let r = residuals.last().unwrap();
        let mut layer_ids = Vec::with_capacity(z.len);
        let mut q = LatentSequence::zeros(z.len, z.dim);
        let mut next = LatentSequence::zeros(z.len, z.dim);
        for t in 0..z.len {
            let id = cb.nearest(r.row(t));
            layer_ids.push(id);
            let e = cb.entry(id);
            for c in 0..z.dim {
                q.values[t * z.dim + c] = e[c];
                next.values[t * z.dim + c] = r.values[t * z.dim + c] - e[c];
            }
        }
        ids.push(layer_ids);
        quantized.push(q);
        residuals.push(next);
    }
    Ok(Quantized {
        tokens: TokenSequence { len: z.len, ids },
        quantized,
        residuals,
    })
}

/// Sum of the entries selected by layers `1..=upto`, accumulated in layer order.
pub fn dequantize(tokens: &TokenSequence, codebooks: &[Codebook], upto: usize) -> Result<LatentSequence> {
    if upto > tokens.layers() || upto > codebooks.len() {
        return Err(ModelError::LayerOutOfRange {
            layer: upto,
            layers: tokens.layers().min(codebooks.len()),
        });
    }
    let dim = codebooks.first().map(|c| c.dim).unwrap_or(0);
    let mut out = LatentSequence::zeros(tokens.len, dim);
    for (l, cb) in codebooks.iter().enumerate().take(upto) {
        for (t, &id) in tokens.ids[l].iter().enumerate() {
            if id >= cb.size() {
                return Err(ModelError::IndexOutOfRange { id, k: cb.size() });
            }
            for (o, e) in out.values[t * dim..(t + 1) * dim].iter_mut().zip(cb.entry(id)) {
                *o += e;
            }
        }
    }
    Ok(out)
}
