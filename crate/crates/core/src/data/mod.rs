//! Dataset ingestion, chronological splits, standardization and sliding
//! windows.

mod csv_io;
mod split;
pub mod synthetic;
mod window;

pub use csv_io::{load_csv, write_csv, ColumnRef, CsvSchema};
pub use split::{
    chronological_split, chronological_split_with_context, split_bounds, standardize, ScalerStats, SplitBounds, SplitSpec, Splits,
};
pub use window::{make_windows, WindowBatch, WindowSampler};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A `[timesteps × variates]` matrix of observations in time order.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesDataset {
    pub name: String,
    pub frequency: String,
    pub columns: Vec<String>,
    values: Tensor,
}

impl TimeSeriesDataset {
    pub fn new(name: impl Into<String>, values: Tensor, columns: Vec<String>) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::Data(format!(
                "dataset values must be [timesteps × variates], got {:?}",
                values.shape()
            )));
        }
        if columns.len() != values.shape()[1] {
            return Err(Error::Data(format!(
                "{} column names for {} variates",
                columns.len(),
                values.shape()[1]
            )));
        }
        if !values.all_finite() {
            return Err(Error::Data("dataset contains non-finite values".into()));
        }
        Ok(Self {
            name: name.into(),
            frequency: "unknown".into(),
            columns,
            values,
        })
    }

    /// Dataset with generated column names `v0, v1, …`.
    pub fn from_rows(name: impl Into<String>, timesteps: usize, variates: usize, data: Vec<f64>) -> Result<Self> {
        let values = Tensor::new(vec![timesteps, variates], data)?;
        let columns = (0..variates).map(|i| format!("v{i}")).collect();
        Self::new(name, values, columns)
    }

    pub fn with_frequency(mut self, frequency: impl Into<String>) -> Self {
        self.frequency = frequency.into();
        self
    }

    pub fn timesteps(&self) -> usize {
        self.values.shape()[0]
    }

    /// Number of variates (channels).
    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let n = self.channels();
        &self.values.data()[t * n..(t + 1) * n]
    }

    /// Rows `start..end` as a new dataset with the same metadata.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.timesteps() {
            return Err(Error::Data(format!(
                "row range {start}..{end} is empty or exceeds {} timesteps",
                self.timesteps()
            )));
        }
        let n = self.channels();
        let values = Tensor::new(
            vec![end - start, n],
            self.values.data()[start * n..end * n].to_vec(),
        )?;
        Ok(Self {
            name: self.name.clone(),
            frequency: self.frequency.clone(),
            columns: self.columns.clone(),
            values,
        })
    }

    pub(crate) fn map_values(&self, f: impl Fn(usize, f64) -> f64) -> Self {
        let n = self.channels();
        let values = Tensor::from_fn(self.values.shape(), |i| f(i % n, self.values.data()[i]));
        Self {
            name: self.name.clone(),
            frequency: self.frequency.clone(),
            columns: self.columns.clone(),
            values,
        }
    }
}
