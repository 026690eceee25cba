#![allow(dead_code)]

pub mod grads;
pub mod oracle;

use gridtst::attention::NormKind;
use gridtst::model::{GridTst, ModelConfig, SequencingMode};
use gridtst::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

/// Two-layer model on 32-step windows with 8-wide patches.
pub fn tiny_config(mode: SequencingMode, variates: usize) -> ModelConfig {
    ModelConfig {
        lookback: 32,
        horizon: 4,
        variates,
        patch_len: 8,
        stride: 4,
        d_model: 8,
        heads: 2,
        layers: 2,
        d_ff: 16,
        dropout: 0.0,
        mode,
        norm: NormKind::Batch,
        seed: 17,
    }
}

/// Replaces every BatchNorm running statistic and zero-initialized tensor
/// with random values so that no term of the forward pass is trivial.
pub fn scramble(model: &mut GridTst, seed: u64) {
    let mut r = rng(seed);
    for (_, t) in model.tensors_mut() {
        for v in t.data_mut() {
            *v += r.gen_range(-0.2..0.2);
        }
    }
    for b in &mut model.blocks {
        for s in [&mut b.params.bn1, &mut b.params.bn2] {
            s.running_mean.iter_mut().for_each(|v| *v = r.gen_range(-0.5..0.5));
            s.running_var.iter_mut().for_each(|v| *v = r.gen_range(0.5..2.0));
        }
    }
}

/// `[B × T × N]` window with per-variate offsets and scales.
pub fn window(b: usize, t: usize, n: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let offsets: Vec<f64> = (0..n).map(|_| r.gen_range(-3.0..3.0)).collect();
    let scales: Vec<f64> = (0..n).map(|_| r.gen_range(0.5..4.0)).collect();
    Tensor::from_fn(&[b, t, n], |i| offsets[i % n] + scales[i % n] * r.gen_range(-1.0..1.0))
}

/// `x[:, :, perm]`
pub fn permute_variates(x: &Tensor, perm: &[usize]) -> Tensor {
    let n = x.shape()[2];
    Tensor::from_fn(x.shape(), |i| {
        let (row, k) = (i / n, i % n);
        x.data()[row * n + perm[k]]
    })
}
