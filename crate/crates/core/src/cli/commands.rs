use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use super::config::{DataConfig, RunConfig};
use crate::data::{chronological_split_with_context, load_csv, standardize, CsvSchema, ScalerStats, Splits, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::model::{write_attention_csvs, Checkpoint, GridTst, RunInfo, SequencingMode};
use crate::tensor::Tensor;
use crate::train::{evaluate, persistence_baseline, train_with, TrainReport};

/// One line of a results table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultRow {
    pub dataset: String,
    #[serde(rename = "T")]
    pub lookback: usize,
    #[serde(rename = "F")]
    pub horizon: usize,
    pub mode: String,
    pub ratio: f64,
    pub seed: u64,
    pub mse: f64,
    pub mae: f64,
    pub wall_s: f64,
}

impl ResultRow {
    pub const HEADER: &'static str = "dataset,T,F,mode,ratio,seed,mse,mae,wall_s";

    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:.3}",
            self.dataset, self.lookback, self.horizon, self.mode, self.ratio, self.seed, self.mse, self.mae, self.wall_s
        )
    }
}

pub(crate) fn write_rows(rows: &[ResultRow], path: &Path) -> Result<()> {
    write_table(path, ResultRow::HEADER, rows.iter().map(ResultRow::to_csv_line))
}

fn write_table(path: &Path, header: &str, lines: impl IntoIterator<Item = String>) -> Result<()> {
    let mut text = format!("{header}\n");
    for l in lines {
        text.push_str(&l);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Standardized splits of the configured dataset.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub name: String,
    pub raw: TimeSeriesDataset,
    pub splits: Splits,
    pub scaler: ScalerStats,
    /// Lookback rows borrowed by validation and test.
    pub context: usize,
}

pub fn prepare_data(data: &DataConfig, lookback: usize) -> Result<PreparedData> {
    if data.path.as_os_str().is_empty() {
        return Err(Error::config("data.path", "no dataset given"));
    }
    let raw = load_csv(&data.path, &data.schema)?;
    let context = if data.borrow_lookback { lookback } else { 0 };
    let splits = chronological_split_with_context(&raw, &data.split, context)?;
    let (splits, scaler) = standardize(&splits)?;
    Ok(PreparedData {
        name: data.label(),
        raw,
        splits,
        scaler,
        context,
    })
}

/// Trains one configuration into `dir` and returns its results row.
fn train_one(cfg: &RunConfig, dir: &Path) -> Result<(ResultRow, TrainReport)> {
    create_dir(dir)?;
    let mut cfg = cfg.clone();
    let data = prepare_data(&cfg.data, cfg.model.lookback)?;
    let n = data.raw.channels();
    if cfg.model.variates != n {
        log::info!("model.variates set to {n} to match {}", data.name);
        cfg.model.variates = n;
    }
    let snapshot = dir.join("config.toml");
    std::fs::write(&snapshot, cfg.to_toml()?).map_err(|e| Error::io(&snapshot, e))?;
    data.scaler.write_csv(&dir.join("scaler.csv"))?;

    let mut model = GridTst::new(cfg.model.clone())?;
    let log_path = dir.join("epochs.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let mut log_err = None;
    let report = train_with(&mut model, &data.splits, &cfg.train, |rec| {
        let line = serde_json::to_string(rec).expect("plain record");
        if let Err(e) = writeln!(log, "{line}") {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(Error::io(&log_path, e));
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;

    let run = RunInfo {
        dataset: data.name.clone(),
        split: Some(cfg.data.split),
        scaler: Some(data.scaler.clone()),
        context: data.context,
        variate_ratio: Some(cfg.train.variate_ratio),
    };
    Checkpoint::from_model(&model, run).save(&dir.join("checkpoint.json"))?;
    let report_path = dir.join("report.json");
    let text = serde_json::to_string_pretty(&report).expect("plain report");
    std::fs::write(&report_path, text).map_err(|e| Error::io(&report_path, e))?;

    let row = ResultRow {
        dataset: data.name,
        lookback: cfg.model.lookback,
        horizon: cfg.model.horizon,
        mode: cfg.model.mode.to_string(),
        ratio: cfg.train.variate_ratio,
        seed: cfg.seed,
        mse: report.test.mse,
        mae: report.test.mae,
        wall_s: report.wall_s,
    };
    write_rows(std::slice::from_ref(&row), &dir.join("results.csv"))?;
    Ok((row, report))
}

/// Trains the configured model, or one model per horizon when
/// `horizons` is non-empty (each in its own `F<h>` subdirectory).
pub fn cmd_train(cfg: &RunConfig, horizons: &[usize]) -> Result<Vec<ResultRow>> {
    if horizons.is_empty() {
        return Ok(vec![train_one(cfg, &cfg.output_dir)?.0]);
    }
    if let Some(&h) = horizons.iter().find(|&&h| h == 0) {
        return Err(Error::config("horizon_sweep", format!("horizon {h} must be positive")));
    }
    let mut rows = Vec::with_capacity(horizons.len());
    for &h in horizons {
        let mut c = cfg.clone();
        c.model.horizon = h;
        rows.push(train_one(&c, &cfg.output_dir.join(format!("F{h}")))?.0);
    }
    create_dir(&cfg.output_dir)?;
    write_rows(&rows, &cfg.output_dir.join("results.csv"))?;
    Ok(rows)
}

/// Test-split metrics of a checkpoint on `data`, using the split, context
/// and scaler recorded at training time.
pub fn cmd_eval(checkpoint: &Path, data: &DataConfig, persistence: bool) -> Result<Vec<ResultRow>> {
    let start = Instant::now();
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.to_model()?;
    let cfg = model.config();
    if data.path.as_os_str().is_empty() {
        return Err(Error::config("data.path", "no dataset given"));
    }
    let raw = load_csv(&data.path, &data.schema)?;
    if raw.channels() != cfg.variates {
        return Err(Error::Data(format!(
            "checkpoint expects {} variates but {} has {}",
            cfg.variates,
            data.path.display(),
            raw.channels()
        )));
    }
    let split = ckpt.run.split.unwrap_or(data.split);
    let splits = chronological_split_with_context(&raw, &split, ckpt.run.context)?;
    let scaler = match &ckpt.run.scaler {
        Some(s) => s.clone(),
        None => ScalerStats::fit(splits.train()?),
    };
    let test = scaler.apply(splits.test()?)?;
    let metrics = evaluate(&model, &test, 256)?;
    let name = if ckpt.run.dataset.is_empty() { data.label() } else { ckpt.run.dataset.clone() };
    let mut rows = vec![ResultRow {
        dataset: name.clone(),
        lookback: cfg.lookback,
        horizon: cfg.horizon,
        mode: cfg.mode.to_string(),
        ratio: ckpt.run.variate_ratio.unwrap_or(1.0),
        seed: cfg.seed,
        mse: metrics.mse,
        mae: metrics.mae,
        wall_s: start.elapsed().as_secs_f64(),
    }];
    if persistence {
        let start = Instant::now();
        let base = persistence_baseline(&test, cfg.lookback, cfg.horizon)?;
        rows.push(ResultRow {
            dataset: name,
            lookback: cfg.lookback,
            horizon: cfg.horizon,
            mode: "persistence".into(),
            ratio: 1.0,
            seed: cfg.seed,
            mse: base.mse,
            mae: base.mae,
            wall_s: start.elapsed().as_secs_f64(),
        });
    }
    Ok(rows)
}

/// Reads a raw window CSV that must hold exactly `rows` rows and `cols`
/// columns.
pub fn load_window(path: &Path, rows: usize, cols: usize) -> Result<TimeSeriesDataset> {
    let ds = load_csv(path, &CsvSchema::default())?;
    if ds.timesteps() != rows || ds.channels() != cols {
        return Err(Error::Data(format!(
            "{}: window is {} rows × {} columns, expected {rows} × {cols}",
            path.display(),
            ds.timesteps(),
            ds.channels()
        )));
    }
    Ok(ds)
}

/// Model input `[1 × T × N]` from a raw window, standardized with the
/// checkpoint's scaler.
fn window_input(ckpt: &Checkpoint, window: &TimeSeriesDataset) -> Result<Tensor> {
    let mut values = window.values().data().to_vec();
    if let Some(s) = &ckpt.run.scaler {
        s.apply_values(&mut values);
    }
    Tensor::new(vec![1, window.timesteps(), window.channels()], values)
}

/// Writes the `[F × N]` forecast for the window in `window_path` to
/// `output` in the window's scale, and returns it.
pub fn cmd_forecast(checkpoint: &Path, window_path: &Path, output: &Path) -> Result<Tensor> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.to_model()?;
    let cfg = model.config();
    let window = load_window(window_path, cfg.lookback, cfg.variates)?;
    let x = window_input(&ckpt, &window)?;
    let pred = model.predict(&x)?;
    let mut values = pred.into_data();
    if let Some(s) = &ckpt.run.scaler {
        s.invert_values(&mut values);
    }
    let forecast = Tensor::new(vec![cfg.horizon, cfg.variates], values)?;
    let out = TimeSeriesDataset::new("forecast", forecast.clone(), window.columns.clone())?;
    crate::data::write_csv(&out, output)?;
    Ok(forecast)
}

pub fn cmd_export_attention(checkpoint: &Path, window_path: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = ckpt.to_model()?;
    let cfg = model.config();
    let window = load_window(window_path, cfg.lookback, cfg.variates)?;
    let x = window_input(&ckpt, &window)?;
    let (_, maps) = model.predict_with_attention(&x)?;
    write_attention_csvs(&maps, out_dir)
}

/// One training run per lookback length, each in a `T<len>` subdirectory.
/// Returns the rows with the patch count of each length.
pub fn cmd_lookback_sweep(cfg: &RunConfig, lengths: &[usize], parallel: bool) -> Result<Vec<(ResultRow, usize)>> {
    if lengths.is_empty() {
        return Err(Error::config("lengths", "no lookback lengths given"));
    }
    let mut configs = Vec::with_capacity(lengths.len());
    for &t in lengths {
        let mut c = cfg.clone();
        c.model.lookback = t;
        c.model.validate().map_err(|e| match e {
            Error::Config { msg, .. } => Error::config("lengths", msg),
            e => e,
        })?;
        configs.push(c);
    }
    let run = |c: &RunConfig| -> Result<(ResultRow, usize)> {
        let dir = cfg.output_dir.join(format!("T{}", c.model.lookback));
        let (row, _) = train_one(c, &dir)?;
        Ok((row, c.model.patches()?))
    };
    let results: Vec<Result<(ResultRow, usize)>> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = configs.iter().map(|c| s.spawn(|| run(c))).collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Data("sweep trial panicked".into()))))
                .collect()
        })
    } else {
        configs.iter().map(run).collect()
    };
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    create_dir(&cfg.output_dir)?;
    write_table(
        &cfg.output_dir.join("lookback_sweep.csv"),
        &format!("{},patches", ResultRow::HEADER),
        rows.iter().map(|(r, m)| format!("{},{m}", r.to_csv_line())),
    )?;
    Ok(rows)
}

/// Trains each sequencing mode and selects the one with the lowest
/// validation MSE. Returns `(row, best validation MSE)` per mode and the
/// selected mode.
pub fn cmd_mode_sweep(cfg: &RunConfig) -> Result<(Vec<(ResultRow, f64)>, SequencingMode)> {
    let mut rows = Vec::new();
    for mode in SequencingMode::ALL {
        let mut c = cfg.clone();
        c.model.mode = mode;
        let (row, report) = train_one(&c, &cfg.output_dir.join(mode.as_str()))?;
        rows.push((row, report.best_val_mse));
    }
    let best = rows
        .iter()
        .zip(SequencingMode::ALL)
        .min_by(|a, b| a.0 .1.total_cmp(&b.0 .1))
        .map(|(_, m)| m)
        .expect("three modes");
    create_dir(&cfg.output_dir)?;
    write_table(
        &cfg.output_dir.join("mode_sweep.csv"),
        &format!("{},val_mse,selected", ResultRow::HEADER),
        rows.iter()
            .map(|(r, v)| format!("{},{v},{}", r.to_csv_line(), r.mode == best.as_str())),
    )?;
    Ok((rows, best))
}
