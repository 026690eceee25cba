use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TimeSeriesDataset;
use crate::error::{Error, Result};

/// Train:validation:test proportions, e.g. 7:1:2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train: u32,
    pub val: u32,
    pub test: u32,
    /// Permit a zero ratio (the split is then empty) instead of rejecting it.
    pub allow_empty: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self::new(7, 1, 2)
    }
}

impl SplitSpec {
    pub const fn new(train: u32, val: u32, test: u32) -> Self {
        Self {
            train,
            val,
            test,
            allow_empty: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train == 0 {
            return Err(Error::config("split.train", "training ratio must be positive"));
        }
        for (name, r) in [("split.val", self.val), ("split.test", self.test)] {
            if r == 0 && !self.allow_empty {
                return Err(Error::config(name, "ratio must be positive (set split.allow_empty to permit)"));
            }
        }
        Ok(())
    }
}

/// End rows of the train and validation splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitBounds {
    pub train_end: usize,
    pub val_end: usize,
    pub len: usize,
}

/// Boundaries at `floor(len · cumulative ratio)`.
pub fn split_bounds(len: usize, spec: &SplitSpec) -> Result<SplitBounds> {
    spec.validate()?;
    let total = u64::from(spec.train) + u64::from(spec.val) + u64::from(spec.test);
    let at = |cum: u64| ((len as u64 * cum) / total) as usize;
    Ok(SplitBounds {
        train_end: at(spec.train.into()),
        val_end: at(u64::from(spec.train) + u64::from(spec.val)),
        len,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    train: Option<TimeSeriesDataset>,
    val: Option<TimeSeriesDataset>,
    test: Option<TimeSeriesDataset>,
}

fn present(s: &Option<TimeSeriesDataset>) -> Result<&TimeSeriesDataset> {
    s.as_ref().ok_or(Error::SplitTooShort { len: 0, needed: 1 })
}

impl Splits {
    pub fn train(&self) -> Result<&TimeSeriesDataset> {
        present(&self.train)
    }

    pub fn val(&self) -> Result<&TimeSeriesDataset> {
        present(&self.val)
    }

    pub fn test(&self) -> Result<&TimeSeriesDataset> {
        present(&self.test)
    }

    pub fn parts(&self) -> [Option<&TimeSeriesDataset>; 3] {
        [self.train.as_ref(), self.val.as_ref(), self.test.as_ref()]
    }

    fn map(&self, f: impl Fn(&TimeSeriesDataset) -> TimeSeriesDataset) -> Self {
        Self {
            train: self.train.as_ref().map(&f),
            val: self.val.as_ref().map(&f),
            test: self.test.as_ref().map(&f),
        }
    }
}

/// Contiguous train/val/test partition in time order.
pub fn chronological_split(ds: &TimeSeriesDataset, spec: &SplitSpec) -> Result<Splits> {
    chronological_split_with_context(ds, spec, 0)
}

/// Like [`chronological_split`], but the validation and test splits are
/// prefixed with up to `context` rows from the preceding split so that their
/// first window can start at the split boundary.
pub fn chronological_split_with_context(
    ds: &TimeSeriesDataset,
    spec: &SplitSpec,
    context: usize,
) -> Result<Splits> {
    let b = split_bounds(ds.timesteps(), spec)?;
    let part = |start: usize, end: usize, name: &str| -> Result<Option<TimeSeriesDataset>> {
        if start >= end {
            if spec.allow_empty {
                log::warn!("{name} split of {} is empty", ds.name);
                return Ok(None);
            }
            return Err(Error::SplitTooShort { len: 0, needed: 1 });
        }
        ds.slice_rows(start, end).map(Some)
    };
    Ok(Splits {
        train: part(0, b.train_end, "train")?,
        val: part(b.train_end.saturating_sub(context), b.val_end, "validation")?,
        test: part(b.val_end.saturating_sub(context), b.len, "test")?,
    })
}

/// Per-variate mean and population standard deviation of the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalerStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ScalerStats {
    pub fn fit(train: &TimeSeriesDataset) -> Self {
        let (t, n) = (train.timesteps(), train.channels());
        let mut mean = vec![0.0; n];
        for r in 0..t {
            mean.iter_mut().zip(train.row(r)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= t as f64);
        let mut var = vec![0.0; n];
        for r in 0..t {
            for ((s, v), m) in var.iter_mut().zip(train.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .iter()
            .zip(&mean)
            .enumerate()
            .map(|(j, (s, m))| {
                let sd = (s / t as f64).sqrt();
                if sd <= 1e-12 * m.abs().max(1.0) {
                    log::warn!("variate {j} of {} is constant in the training split; std clamped to 1", train.name);
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, ds: &TimeSeriesDataset) -> Result<TimeSeriesDataset> {
        self.check(ds.channels())?;
        Ok(ds.map_values(|j, v| (v - self.mean[j]) / self.std[j]))
    }

    pub fn invert(&self, ds: &TimeSeriesDataset) -> Result<TimeSeriesDataset> {
        self.check(ds.channels())?;
        Ok(ds.map_values(|j, v| v * self.std[j] + self.mean[j]))
    }

    /// Inverse transform of a flat buffer whose last axis is the variate axis.
    pub fn invert_values(&self, values: &mut [f64]) {
        let n = self.mean.len();
        for (i, v) in values.iter_mut().enumerate() {
            *v = *v * self.std[i % n] + self.mean[i % n];
        }
    }

    /// Forward transform of a flat buffer whose last axis is the variate axis.
    pub fn apply_values(&self, values: &mut [f64]) {
        let n = self.mean.len();
        for (i, v) in values.iter_mut().enumerate() {
            *v = (*v - self.mean[i % n]) / self.std[i % n];
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        if n != self.mean.len() {
            return Err(Error::Data(format!(
                "scaler fitted on {} variates applied to {n}",
                self.mean.len()
            )));
        }
        Ok(())
    }

    /// Sidecar CSV with header `variate_index,mean,std`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("variate_index,mean,std\n");
        for (j, (m, s)) in self.mean.iter().zip(&self.std).enumerate() {
            out.push_str(&format!("{j},{m},{s}\n"));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            let parse = |k: usize| -> Result<f64> {
                fields
                    .get(k)
                    .and_then(|f| f.trim().parse().ok())
                    .ok_or_else(|| Error::Cell {
                        path: path.to_path_buf(),
                        row: i + 1,
                        column: k + 1,
                        msg: "expected a number".into(),
                    })
            };
            if parse(0)? as usize != mean.len() {
                return Err(Error::Data(format!("{}: variate indices out of order", path.display())));
            }
            mean.push(parse(1)?);
            std.push(parse(2)?);
        }
        Ok(Self { mean, std })
    }
}

/// Standardizes all splits with statistics fitted on the training split.
pub fn standardize(splits: &Splits) -> Result<(Splits, ScalerStats)> {
    let stats = ScalerStats::fit(splits.train()?);
    let out = splits.map(|d| stats.apply(d).expect("same dataset, same width"));
    Ok((out, stats))
}
