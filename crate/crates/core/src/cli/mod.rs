//! The `gridtst` command line: argument parsing, run configuration and the
//! experiment commands.

mod commands;
mod config;

pub use commands::{
    cmd_eval, cmd_export_attention, cmd_forecast, cmd_lookback_sweep, cmd_mode_sweep, cmd_train, load_window, prepare_data,
    PreparedData, ResultRow,
};
pub use config::{apply_override, DataConfig, RunConfig};

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::attention::count_attention_cost;
use crate::data::{synthetic, write_csv};
use crate::error::{Error, Result};
use crate::model::{sequence_layers, SequencingMode};

#[derive(Debug, Parser)]
#[command(name = "gridtst", version, about = "Grid-attention transformer for multivariate forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Config file plus overrides, shared by the training commands.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// TOML run configuration.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set model.d_model=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Dataset CSV; same as `--set data.path=...`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; same as `--set output_dir=...`.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(d) = &self.data {
            overrides.push(format!("data.path={}", toml_string(&d.to_string_lossy())));
        }
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        if let Some(o) = &self.out {
            overrides.push(format!("output_dir={}", toml_string(&o.to_string_lossy())));
        }
        let cfg = RunConfig::load(self.config.as_deref(), &overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SynthKind {
    /// 4 correlated sines, 10k steps, period 24, noise 0.05.
    Smoke,
    Sinusoids,
    LongMemory,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, epoch log and results.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Train once per horizon, e.g. `96,192,336,720`.
        #[arg(long, value_delimiter = ',')]
        horizon_sweep: Vec<usize>,
    },
    /// Score a checkpoint on the test split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Add a repeat-last-value baseline row.
        #[arg(long)]
        persistence: bool,
        /// Metrics CSV; printed to stdout when omitted.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Forecast the horizon after one lookback window.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV with exactly lookback rows and one column per variate.
        #[arg(long)]
        window: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write head-averaged attention maps for one window.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        window: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train and evaluate once per lookback length.
    LookbackSweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        lengths: Vec<usize>,
        /// Run the trials on separate threads.
        #[arg(long)]
        parallel: bool,
    },
    /// Train every sequencing mode and pick the best on validation MSE.
    ModeSweep {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print attention score counts for a grid.
    Cost {
        #[arg(long)]
        patches: usize,
        #[arg(long)]
        variates: usize,
        #[arg(long)]
        d_model: usize,
        #[arg(long)]
        layers: usize,
        #[arg(long, default_value = "alternate")]
        mode: String,
    },
    /// Write a seeded synthetic dataset as CSV.
    Synth {
        #[arg(long, value_enum, default_value = "smoke")]
        kind: SynthKind,
        #[arg(long, default_value_t = 10_000)]
        steps: usize,
        #[arg(long, default_value_t = 4)]
        variates: usize,
        #[arg(long, default_value_t = 24.0)]
        period: f64,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        /// Cycle-to-cycle waveform correlation for `long-memory`.
        #[arg(long, default_value_t = 0.95)]
        persistence: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { cfg, horizon_sweep } => {
            let cfg = cfg.resolve()?;
            let rows = cmd_train(&cfg, &horizon_sweep)?;
            print_rows(&rows);
        }
        Command::Eval {
            checkpoint,
            cfg,
            persistence,
            metrics,
        } => {
            let cfg = RunConfig::load(cfg.config.as_deref(), &cfg_overrides(&cfg))?;
            let rows = cmd_eval(&checkpoint, &cfg.data, persistence)?;
            match metrics {
                Some(path) => commands::write_rows(&rows, &path)?,
                None => print_rows(&rows),
            }
        }
        Command::Forecast {
            checkpoint,
            window,
            output,
        } => {
            cmd_forecast(&checkpoint, &window, &output)?;
        }
        Command::ExportAttention {
            checkpoint,
            window,
            out_dir,
        } => {
            for p in cmd_export_attention(&checkpoint, &window, &out_dir)? {
                println!("{}", p.display());
            }
        }
        Command::LookbackSweep { cfg, lengths, parallel } => {
            let cfg = cfg.resolve()?;
            let rows = cmd_lookback_sweep(&cfg, &lengths, parallel)?;
            print_rows(&rows.into_iter().map(|(r, _)| r).collect::<Vec<_>>());
        }
        Command::ModeSweep { cfg } => {
            let cfg = cfg.resolve()?;
            let (rows, best) = cmd_mode_sweep(&cfg)?;
            print_rows(&rows.into_iter().map(|(r, _)| r).collect::<Vec<_>>());
            println!("selected mode: {best}");
        }
        Command::Cost {
            patches,
            variates,
            d_model,
            layers,
            mode,
        } => {
            let mode: SequencingMode = mode.parse()?;
            let stack = sequence_layers(mode, layers);
            let cost = count_attention_cost(patches, variates, d_model, &stack);
            let flat = count_attention_cost(patches, variates, d_model, &vec![crate::attention::Direction::Horizontal; layers]);
            println!("mode,layers,score_entries,score_macs");
            println!("{mode},{layers},{},{}", cost.score_entries, cost.score_macs);
            println!("all_horizontal,{layers},{},{}", flat.score_entries, flat.score_macs);
        }
        Command::Synth {
            kind,
            steps,
            variates,
            period,
            noise,
            persistence,
            seed,
            output,
        } => {
            let ds = match kind {
                SynthKind::Smoke => synthetic::smoke_dataset(seed),
                SynthKind::Sinusoids => synthetic::correlated_sinusoids(steps, variates, period, noise, seed),
                SynthKind::LongMemory => {
                    if period < 1.0 || period.fract() != 0.0 {
                        return Err(Error::config("period", "long-memory period must be a positive integer"));
                    }
                    synthetic::long_memory(steps, variates, period as usize, persistence, noise, seed)
                }
            };
            write_csv(&ds, &output)?;
        }
    }
    Ok(())
}

fn cfg_overrides(cfg: &ConfigArgs) -> Vec<String> {
    let mut o = cfg.overrides.clone();
    if let Some(d) = &cfg.data {
        o.push(format!("data.path={}", toml_string(&d.to_string_lossy())));
    }
    o
}

fn print_rows(rows: &[ResultRow]) {
    println!("{}", ResultRow::HEADER);
    for r in rows {
        println!("{}", r.to_csv_line());
    }
}

/// Parses arguments, runs the command and maps errors to exit statuses:
/// 0 success, 1 runtime failure, 2 usage or configuration error.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
