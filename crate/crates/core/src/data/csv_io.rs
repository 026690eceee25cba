use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TimeSeriesDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A column selected by header name or zero-based position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnRef {
    Index(usize),
    Name(String),
}

impl std::fmt::Display for ColumnRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ColumnRef::Index(i) => write!(f, "#{i}"),
            ColumnRef::Name(n) => write!(f, "`{n}`"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvSchema {
    /// Column dropped before parsing values, typically a timestamp.
    pub date_column: Option<ColumnRef>,
    /// Columns kept as variates, in this order. All remaining columns when unset.
    pub value_columns: Option<Vec<ColumnRef>>,
    pub frequency: Option<String>,
}

fn is_number(cell: &str) -> bool {
    cell.trim().parse::<f64>().is_ok()
}

fn resolve(col: &ColumnRef, header: Option<&[String]>, width: usize, path: &Path) -> Result<usize> {
    let idx = match col {
        ColumnRef::Index(i) => Some(*i).filter(|&i| i < width),
        ColumnRef::Name(name) => header.and_then(|h| h.iter().position(|c| c.trim() == name)),
    };
    idx.ok_or_else(|| {
        Error::Data(format!(
            "{}: column {col} not found (header: {})",
            path.display(),
            header.map(|h| h.join(",")).unwrap_or_else(|| "none".into())
        ))
    })
}

/// Reads a numeric CSV. The first row is treated as a header when it holds a
/// non-numeric cell in a column whose next row is numeric.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<TimeSeriesDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(file);
    let mut records: Vec<csv::StringRecord> = Vec::new();
    for rec in reader.records() {
        records.push(rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?);
    }
    if records.is_empty() {
        return Err(Error::Data(format!("{}: file is empty", path.display())));
    }
    let width = records[0].len();
    let has_header = match records.get(1) {
        Some(next) => records[0]
            .iter()
            .zip(next.iter())
            .any(|(a, b)| !is_number(a) && is_number(b)),
        None => records[0].iter().any(|c| !is_number(c)),
    };
    let header: Option<Vec<String>> = has_header.then(|| records[0].iter().map(str::to_owned).collect());
    let first_data = usize::from(has_header);

    let date = schema
        .date_column
        .as_ref()
        .map(|c| resolve(c, header.as_deref(), width, path))
        .transpose()?;
    let keep: Vec<usize> = match &schema.value_columns {
        Some(cols) => cols
            .iter()
            .map(|c| resolve(c, header.as_deref(), width, path))
            .collect::<Result<_>>()?,
        None => (0..width).filter(|&i| Some(i) != date).collect(),
    };
    if keep.is_empty() {
        return Err(Error::Data(format!("{}: no value columns", path.display())));
    }

    let rows = records.len() - first_data;
    if rows == 0 {
        return Err(Error::Data(format!("{}: header but no data rows", path.display())));
    }
    let mut data = Vec::with_capacity(rows * keep.len());
    for (r, rec) in records.iter().enumerate().skip(first_data) {
        if rec.len() != width {
            return Err(Error::Data(format!(
                "{}: row {} has {} fields, expected {width}",
                path.display(),
                r + 1,
                rec.len()
            )));
        }
        for &c in &keep {
            let cell = rec[c].trim();
            let bad = |msg: String| Error::Cell {
                path: path.to_path_buf(),
                row: r + 1,
                column: c + 1,
                msg,
            };
            if cell.is_empty() {
                return Err(bad("blank cell".into()));
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| bad(format!("cannot parse {cell:?} as a number")))?;
            if !v.is_finite() {
                return Err(bad(format!("non-finite value {cell:?}")));
            }
            data.push(v);
        }
    }
    let columns = keep
        .iter()
        .map(|&c| match &header {
            Some(h) => h[c].trim().to_owned(),
            None => format!("v{c}"),
        })
        .collect();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    let ds = TimeSeriesDataset::new(name, Tensor::new(vec![rows, keep.len()], data)?, columns)?;
    Ok(match &schema.frequency {
        Some(f) => ds.with_frequency(f.clone()),
        None => ds,
    })
}

/// Writes a dataset with a header row of its column names.
pub fn write_csv(ds: &TimeSeriesDataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(&ds.columns).map_err(err)?;
    for t in 0..ds.timesteps() {
        w.write_record(ds.row(t).iter().map(|v| v.to_string())).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
