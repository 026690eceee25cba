use rand::seq::SliceRandom;
use rand::Rng;

use super::TimeSeriesDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A batch of `(lookback, horizon)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    /// `[B × T × N']`
    pub inputs: Tensor,
    /// `[B × F × N']`
    pub targets: Tensor,
    /// Source variates present on the last axis, when a subset was taken.
    pub variate_index: Option<Vec<usize>>,
    /// Start row of each window in its split.
    pub starts: Vec<usize>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }
}

/// Stride-1 sliding windows over one split.
#[derive(Clone, Copy, Debug)]
pub struct WindowSampler<'a> {
    ds: &'a TimeSeriesDataset,
    lookback: usize,
    horizon: usize,
}

/// Windows of `lookback` inputs followed immediately by `horizon` targets.
pub fn make_windows(ds: &TimeSeriesDataset, lookback: usize, horizon: usize) -> Result<WindowSampler<'_>> {
    WindowSampler::new(ds, lookback, horizon)
}

impl<'a> WindowSampler<'a> {
    pub fn new(ds: &'a TimeSeriesDataset, lookback: usize, horizon: usize) -> Result<Self> {
        if lookback == 0 || horizon == 0 {
            return Err(Error::config("data", "lookback and horizon must be positive"));
        }
        let needed = lookback + horizon;
        if ds.timesteps() < needed {
            return Err(Error::SplitTooShort {
                len: ds.timesteps(),
                needed,
            });
        }
        Ok(Self { ds, lookback, horizon })
    }

    /// `timesteps − T − F + 1`
    pub fn len(&self) -> usize {
        self.ds.timesteps() - self.lookback - self.horizon + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dataset(&self) -> &TimeSeriesDataset {
        self.ds
    }

    /// Window start rows in time order, or a seeded permutation of them.
    pub fn order<R: Rng + ?Sized>(&self, shuffle: Option<&mut R>) -> Vec<usize> {
        let mut starts: Vec<usize> = (0..self.len()).collect();
        if let Some(rng) = shuffle {
            starts.shuffle(rng);
        }
        starts
    }

    /// Gathers the windows starting at `starts`, optionally keeping only the
    /// listed variates (in the listed order).
    pub fn batch(&self, starts: &[usize], variates: Option<&[usize]>) -> Result<WindowBatch> {
        let n = self.ds.channels();
        if let Some(idx) = variates {
            if idx.is_empty() || idx.iter().any(|&v| v >= n) {
                return Err(Error::invalid("batch", format!("variate subset {idx:?} invalid for {n} variates")));
            }
        }
        let all: Vec<usize>;
        let cols = match variates {
            Some(idx) => idx,
            None => {
                all = (0..n).collect();
                &all
            }
        };
        let (t, f) = (self.lookback, self.horizon);
        let mut inputs = Vec::with_capacity(starts.len() * t * cols.len());
        let mut targets = Vec::with_capacity(starts.len() * f * cols.len());
        for &s in starts {
            if s >= self.len() {
                return Err(Error::invalid("batch", format!("window start {s} out of range 0..{}", self.len())));
            }
            for r in s..s + t {
                let row = self.ds.row(r);
                inputs.extend(cols.iter().map(|&c| row[c]));
            }
            for r in s + t..s + t + f {
                let row = self.ds.row(r);
                targets.extend(cols.iter().map(|&c| row[c]));
            }
        }
        let b = starts.len();
        Ok(WindowBatch {
            inputs: Tensor::new(vec![b, t, cols.len()], inputs)?,
            targets: Tensor::new(vec![b, f, cols.len()], targets)?,
            variate_index: variates.map(<[usize]>::to_vec),
            starts: starts.to_vec(),
        })
    }

    /// Consecutive batches over `order`; the last batch may be smaller.
    pub fn batches<'s>(&'s self, order: &'s [usize], batch_size: usize) -> impl Iterator<Item = Result<WindowBatch>> + 's {
        order.chunks(batch_size.max(1)).map(move |chunk| self.batch(chunk, None))
    }
}
