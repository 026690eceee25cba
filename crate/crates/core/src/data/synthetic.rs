//! Seeded synthetic datasets used by tests, examples and the smoke runs.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::TimeSeriesDataset;

/// `variates` sines of period `period`, each phase-shifted by a quarter of
/// π from the previous one, plus i.i.d. Gaussian noise of std `noise`.
pub fn correlated_sinusoids(steps: usize, variates: usize, period: f64, noise: f64, seed: u64) -> TimeSeriesDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.max(0.0)).expect("finite std");
    let mut data = Vec::with_capacity(steps * variates);
    for t in 0..steps {
        for n in 0..variates {
            let phase = n as f64 * PI / 4.0;
            data.push((2.0 * PI * t as f64 / period + phase).sin() + normal.sample(&mut rng));
        }
    }
    TimeSeriesDataset::from_rows("sinusoids", steps, variates, data).expect("generated shape")
}

/// The acceptance dataset: 10k steps of 4 correlated sines (period 24,
/// noise σ = 0.05).
pub fn smoke_dataset(seed: u64) -> TimeSeriesDataset {
    correlated_sinusoids(10_000, 4, 24.0, 0.05, seed)
}

/// Series whose value at `t` is most predictable from the value one
/// `period` earlier: every cycle is a damped copy of the previous cycle's
/// waveform plus a fresh smooth random waveform, so the shape drifts and
/// cannot be memorized, but a lookback longer than `period` sees the cycle
/// that is about to repeat.
pub fn long_memory(steps: usize, variates: usize, period: usize, persistence: f64, noise: f64, seed: u64) -> TimeSeriesDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.max(0.0)).expect("finite std");
    let harmonics = 12;
    let fresh = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let coef: Vec<(f64, f64)> = (1..=harmonics)
            .map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(0.0..2.0 * PI)))
            .collect();
        let wave: Vec<f64> = (0..period)
            .map(|i| {
                coef.iter()
                    .enumerate()
                    .map(|(h, (a, ph))| a * (2.0 * PI * (h + 1) as f64 * i as f64 / period as f64 + ph).sin())
                    .sum()
            })
            .collect();
        let rms = (wave.iter().map(|v| v * v).sum::<f64>() / period as f64).sqrt();
        wave.into_iter().map(|v| v / rms).collect()
    };
    let mut shapes: Vec<Vec<f64>> = (0..variates).map(|_| fresh(&mut rng)).collect();
    let keep = persistence.clamp(0.0, 1.0);
    let innov = (1.0 - keep * keep).sqrt();
    let mut data = Vec::with_capacity(steps * variates);
    for t in 0..steps {
        if t > 0 && t % period == 0 {
            for shape in shapes.iter_mut() {
                let f = fresh(&mut rng);
                for (s, v) in shape.iter_mut().zip(f) {
                    *s = keep * *s + innov * v;
                }
            }
        }
        for shape in &shapes {
            data.push(shape[t % period] + normal.sample(&mut rng));
        }
    }
    TimeSeriesDataset::from_rows("long_memory", steps, variates, data).expect("generated shape")
}
