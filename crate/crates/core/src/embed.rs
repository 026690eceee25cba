//! Window-level preprocessing and patch tokenization.
//!
//! A lookback window `[T × N]` is instance-normalized per variate, padded at
//! the tail by repeating its last row, cut into `M` patches of length `P`
//! with stride `S`, and projected to the `[M × N × D]` token grid.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Lower bound on a window's per-variate standard deviation.
pub const STD_FLOOR: f64 = 1e-5;

/// Per-variate mean and standard deviation of one window.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn variates(&self) -> usize {
        self.mean.len()
    }
}

/// Patch length and stride.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchConfig {
    pub patch_len: usize,
    pub stride: usize,
}

impl PatchConfig {
    pub fn new(patch_len: usize, stride: usize) -> Result<Self> {
        if patch_len == 0 {
            return Err(Error::config("model.patch_len", "must be at least 1"));
        }
        if stride == 0 || stride > patch_len {
            return Err(Error::config(
                "model.stride",
                format!("must lie in 1..={patch_len} (gaps between patches are not allowed)"),
            ));
        }
        Ok(Self { patch_len, stride })
    }

    /// `M = ⌈(T − P) / S⌉ + 2`, defined for `T ≥ P`.
    pub fn patch_count(&self, lookback: usize) -> Result<usize> {
        if lookback < self.patch_len {
            return Err(Error::config(
                "data.lookback",
                format!(
                    "lookback {lookback} is shorter than patch length {}",
                    self.patch_len
                ),
            ));
        }
        Ok((lookback - self.patch_len).div_ceil(self.stride) + 2)
    }

    /// Length after tail padding: `(M − 1)·S + P`.
    pub fn padded_len(&self, lookback: usize) -> Result<usize> {
        Ok((self.patch_count(lookback)? - 1) * self.stride + self.patch_len)
    }
}

fn column_stats(x: &Tensor) -> Result<(usize, usize, Vec<f64>, Vec<f64>)> {
    if x.rank() != 2 {
        return Err(Error::invalid(
            "revin_normalize",
            format!("expected [T × N], got {:?}", x.shape()),
        ));
    }
    let (t, n) = (x.shape()[0], x.shape()[1]);
    let mut mean = vec![0.0; n];
    for row in x.data().chunks_exact(n) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= t as f64);
    let mut var = vec![0.0; n];
    for row in x.data().chunks_exact(n) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var
        .iter()
        .map(|s| (s / t as f64).sqrt().max(STD_FLOOR))
        .collect();
    Ok((t, n, mean, std))
}

/// Normalizes each column of a `[T × N]` window to zero mean and unit
/// (population) standard deviation.
pub fn revin_normalize(x: &Tensor) -> Result<(Tensor, NormStats)> {
    let (_, n, mean, std) = column_stats(x)?;
    let out = Tensor::from_fn(x.shape(), |i| {
        let j = i % n;
        (x.data()[i] - mean[j]) / std[j]
    });
    Ok((out, NormStats { mean, std }))
}

/// `ŷ·std + mean` per variate for a `[F × N]` (or any `[.. × N]`) tensor.
pub fn revin_denormalize(y: &Tensor, stats: &NormStats) -> Result<Tensor> {
    let n = *y.shape().last().unwrap();
    if n != stats.variates() {
        return Err(Error::invalid(
            "revin_denormalize",
            format!("prediction has {n} variates, stats have {}", stats.variates()),
        ));
    }
    Ok(Tensor::from_fn(y.shape(), |i| {
        let j = i % n;
        y.data()[i] * stats.std[j] + stats.mean[j]
    }))
}

/// Repeats the final row of a `[T × N]` window until it is
/// `(M − 1)·S + P` rows long.
pub fn pad_tail(x: &Tensor, patch: PatchConfig) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(Error::invalid("pad_tail", format!("expected [T × N], got {:?}", x.shape())));
    }
    let (t, n) = (x.shape()[0], x.shape()[1]);
    let padded = patch.padded_len(t)?;
    let mut data = Vec::with_capacity(padded * n);
    data.extend_from_slice(x.data());
    let last = &x.data()[(t - 1) * n..];
    for _ in t..padded {
        data.extend_from_slice(last);
    }
    Tensor::new(vec![padded, n], data)
}

/// Cuts one padded series into `M` patches: row `i` is `x[i·S .. i·S + P]`.
pub fn patchify(series: &[f64], patch: PatchConfig) -> Result<Tensor> {
    let (p, s) = (patch.patch_len, patch.stride);
    if series.len() < p || !(series.len() - p).is_multiple_of(s) {
        return Err(Error::invalid(
            "patchify",
            format!("length {} is not (M − 1)·{s} + {p} for any M", series.len()),
        ));
    }
    let m = (series.len() - p) / s + 1;
    let mut data = Vec::with_capacity(m * p);
    for i in 0..m {
        data.extend_from_slice(&series[i * s..i * s + p]);
    }
    Tensor::new(vec![m, p], data)
}

/// Normalized, padded and patched batch ready for projection.
#[derive(Clone, Debug)]
pub struct PatchedBatch {
    /// `[B × N × M × P]`
    pub patches: Tensor,
    /// one entry per window
    pub stats: Vec<NormStats>,
}

/// Runs normalize → pad → patchify on every window of a `[B × T × N]` batch.
pub fn prepare_batch(x: &Tensor, patch: PatchConfig) -> Result<PatchedBatch> {
    if x.rank() != 3 {
        return Err(Error::invalid(
            "prepare_batch",
            format!("expected [B × T × N], got {:?}", x.shape()),
        ));
    }
    let (b, t, n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let m = patch.patch_count(t)?;
    let p = patch.patch_len;
    let mut data = Vec::with_capacity(b * n * m * p);
    let mut stats = Vec::with_capacity(b);
    let mut column = Vec::new();
    for w in 0..b {
        let window = Tensor::new(vec![t, n], x.data()[w * t * n..(w + 1) * t * n].to_vec())?;
        let (normed, st) = revin_normalize(&window)?;
        let padded = pad_tail(&normed, patch)?;
        let rows = padded.shape()[0];
        for v in 0..n {
            column.clear();
            column.extend((0..rows).map(|r| padded.data()[r * n + v]));
            data.extend_from_slice(patchify(&column, patch)?.data());
        }
        stats.push(st);
    }
    Ok(PatchedBatch {
        patches: Tensor::new(vec![b, n, m, p], data)?,
        stats,
    })
}

/// `patches·W_p + W_pos` with the same projection and position table shared
/// by every variate. `patches` is `[.. × M × P]`, result `[.. × M × D]`.
pub fn embed_patches(g: &mut Graph, patches: Var, w_p: Var, w_pos: Var) -> Result<Var> {
    let projected = g.matmul(patches, w_p)?;
    g.add(projected, w_pos)
}
