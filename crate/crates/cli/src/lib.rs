//! Argument parsing and command dispatch for the `stiffkit` binary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use stiffkit::dataset::DatasetError;
use stiffkit::experiment::{
    analyze_snapshot_file, load_reports, log_event, run_experiment, run_sweep, summarize,
    write_figure_data, DatasetSource, ExperimentConfig, ExperimentError, Seeds,
};
use stiffkit::stiffness::{PairMode, StiffnessMetric};

/// Environment variable holding the worker-thread count.
pub const WORKERS_ENV: &str = "STIFFKIT_WORKERS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Experiment(e) if e.is_numerical() => EXIT_NUMERICAL,
            _ => EXIT_DATA,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "stiffkit", version, about = "Gradient-alignment analysis of small networks")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Debug, Subcommand)]
enum Sub {
    /// Generate a synthetic hierarchical dataset as JSON.
    GenData(Overrides),
    /// Train one model, analyzing stiffness at each checkpoint.
    Train(Overrides),
    /// Analyze exported gradient snapshots.
    Analyze {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(required = true)]
        snapshots: Vec<PathBuf>,
    },
    /// Train one model per learning rate and compare ξ at matched loss.
    Sweep(Overrides),
    /// Summarize report files and emit plot-ready CSVs.
    Report {
        #[command(flatten)]
        overrides: Overrides,
        reports: Vec<PathBuf>,
    },
}

/// Flags shared by every command. Flags override config-file values.
#[derive(Debug, Clone, Default, PartialEq, Args)]
pub struct Overrides {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base seed for init, shuffling and subset selection (dataset seed for gen-data).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated learning rates.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    pub lr: Option<Vec<f64>>,
    #[arg(long)]
    pub metric: Option<StiffnessMetric>,
    #[arg(long)]
    pub mode: Option<PairMode>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommandKind {
    GenData,
    Train,
    Analyze,
    Sweep,
    Report,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliCommand {
    pub kind: CommandKind,
    pub overrides: Overrides,
    /// Snapshot files for `analyze`, report files for `report`.
    pub inputs: Vec<PathBuf>,
}

impl CliCommand {
    pub fn config_path(&self) -> Option<&Path> {
        self.overrides.config.as_deref()
    }
}

/// Parses `argv` (without the program name). Unknown flags and malformed
/// values are usage errors naming the offending token.
pub fn parse_args<I, S>(argv: I) -> Result<CliCommand, clap::Error>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let args = std::iter::once(std::ffi::OsString::from("stiffkit")).chain(argv.into_iter().map(Into::into));
    let cli = Cli::try_parse_from(args)?;
    let (kind, overrides, inputs) = match cli.command {
        Sub::GenData(o) => (CommandKind::GenData, o, vec![]),
        Sub::Train(o) => (CommandKind::Train, o, vec![]),
        Sub::Sweep(o) => (CommandKind::Sweep, o, vec![]),
        Sub::Analyze {
            overrides,
            snapshots,
        } => (CommandKind::Analyze, overrides, snapshots),
        Sub::Report { overrides, reports } => (CommandKind::Report, overrides, reports),
    };
    Ok(CliCommand {
        kind,
        overrides,
        inputs,
    })
}

fn load_config(cmd: &CliCommand) -> Result<ExperimentConfig, CliError> {
    let path = cmd
        .config_path()
        .ok_or_else(|| CliError::Usage("missing --config <path>".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    let o = &cmd.overrides;
    if let Some(seed) = o.seed {
        cfg.seeds = Seeds::from_base(seed);
    }
    if let Some(out) = &o.out {
        cfg.output_dir = Some(out.clone());
    }
    if let Some(lr) = &o.lr {
        cfg.learning_rates = lr.clone();
    }
    if let Some(m) = o.metric {
        cfg.metrics = vec![m];
    }
    if let Some(m) = o.mode {
        cfg.modes = vec![m];
    }
    if cfg.output_dir.is_none() {
        cfg.output_dir = Some(PathBuf::from("out"));
    }
    Ok(cfg)
}

fn out_dir(cmd: &CliCommand) -> PathBuf {
    cmd.overrides.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn metrics_modes(o: &Overrides) -> (Vec<StiffnessMetric>, Vec<PairMode>) {
    (
        o.metric.map(|m| vec![m]).unwrap_or_else(|| StiffnessMetric::ALL.to_vec()),
        o.mode.map(|m| vec![m]).unwrap_or_else(|| PairMode::ALL.to_vec()),
    )
}

/// Executes a parsed command and returns the human-readable summary.
pub fn execute(cmd: &CliCommand) -> Result<String, CliError> {
    match cmd.kind {
        CommandKind::GenData => {
            let cfg = load_config(cmd)?;
            let DatasetSource::Synthetic(mut synth) = cfg.dataset else {
                return Err(CliError::Usage("gen-data needs a synthetic dataset config".into()));
            };
            if let Some(seed) = cmd.overrides.seed {
                synth.seed = seed;
            }
            let ds = stiffkit::dataset::synth_hierarchy(&synth)?;
            let dir = cfg.output_dir.unwrap_or_default();
            std::fs::create_dir_all(&dir).map_err(|source| DatasetError::Io {
                path: dir.display().to_string(),
                source,
            })?;
            let path = dir.join("dataset.json");
            ds.save_json(&path, Some(&synth))?;
            log_event(&dir, "gen-data")?;
            Ok(format!(
                "wrote {} ({} train, {} validation, {} classes, dim {})\n",
                path.display(),
                ds.train.len(),
                ds.validation.len(),
                ds.num_classes,
                ds.input_dim()
            ))
        }
        CommandKind::Train => {
            let cfg = load_config(cmd)?;
            if cfg.learning_rates.len() != 1 {
                return Err(CliError::Usage(
                    "train takes exactly one learning rate; use sweep for several".into(),
                ));
            }
            let run = run_experiment(&cfg)?;
            Ok(summarize(&[&run]))
        }
        CommandKind::Sweep => {
            let cfg = load_config(cmd)?;
            let sweep = run_sweep(&cfg)?;
            let runs: Vec<_> = sweep.runs.iter().collect();
            let mut s = summarize(&runs);
            for m in &sweep.matched {
                let _ = writeln!(
                    s,
                    "matched {} {}: {} grid points",
                    m.metric.name(),
                    m.mode.name(),
                    m.grid.len()
                );
            }
            Ok(s)
        }
        CommandKind::Analyze => {
            let (metrics, modes) = metrics_modes(&cmd.overrides);
            let dir = out_dir(cmd);
            let reports = analyze_snapshot_file(&cmd.inputs, &metrics, &modes, &dir)?;
            log_event(&dir, &format!("analyze {} snapshot(s)", reports.len()))?;
            let mut s = String::new();
            for r in &reports {
                let _ = writeln!(s, "{} (epoch {}):", r.source, r.meta.epoch);
                for a in &r.analyses {
                    let wb = a.within_between;
                    let _ = writeln!(
                        s,
                        "  {:<6} {:<11} within={} between={} xi={}",
                        a.metric.name(),
                        a.mode.name(),
                        fmt(wb.map(|w| w.within)),
                        fmt(wb.map(|w| w.between)),
                        fmt(a.xi.xi)
                    );
                }
            }
            Ok(s)
        }
        CommandKind::Report => {
            let reports = load_reports(&cmd.inputs)?;
            let dir = out_dir(cmd);
            let s = write_figure_data(&dir, &reports)?;
            log_event(&dir, &format!("report {} file(s)", reports.len()))?;
            Ok(s)
        }
    }
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

/// Sizes the global worker pool from [`WORKERS_ENV`]; unset means all cores.
pub fn init_workers() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{WORKERS_ENV} must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

/// Full entry point: parse, run, print; returns the exit code.
pub fn main_with_args<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cmd = match parse_args(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Err(e) = init_workers() {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    match execute(&cmd) {
        Ok(summary) => {
            print!("{summary}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_command() {
        let c = parse_args(["train", "--config", "exp.json"]).unwrap();
        assert_eq!(c.kind, CommandKind::Train);
        assert_eq!(c.config_path(), Some(Path::new("exp.json")));
    }

    #[test]
    fn lr_type_mismatch() {
        let e = parse_args(["train", "--lr", "abc"]).unwrap_err();
        assert!(e.to_string().contains("abc"));
        assert!(e.use_stderr());
    }

    #[test]
    fn sweep_lr_list() {
        let c = parse_args(["sweep", "--config", "exp.json", "--lr", "1e-3,1e-2"]).unwrap();
        assert_eq!(c.kind, CommandKind::Sweep);
        assert_eq!(c.overrides.lr, Some(vec![1e-3, 1e-2]));
    }

    #[test]
    fn unknown_flag_is_named() {
        let e = parse_args(["train", "--config", "x.json", "--bogus", "1"]).unwrap_err();
        assert!(e.to_string().contains("--bogus"));
        let e = parse_args(["analyze", "--metric", "tanh", "a.snap"]).unwrap_err();
        assert!(e.to_string().contains("tanh"));
    }

    #[test]
    fn metric_mode_and_inputs() {
        let c = parse_args(["analyze", "--metric", "sign", "--mode", "val-val", "a.snap", "b.snap"]).unwrap();
        assert_eq!(c.kind, CommandKind::Analyze);
        assert_eq!(c.overrides.metric, Some(StiffnessMetric::Sign));
        assert_eq!(c.overrides.mode, Some(PairMode::ValVal));
        assert_eq!(c.inputs.len(), 2);
        assert!(parse_args(["analyze"]).is_err());
    }

    #[test]
    fn missing_config_is_usage() {
        let c = parse_args(["train"]).unwrap();
        let e = execute(&c).unwrap_err();
        assert_eq!(e.exit_code(), EXIT_USAGE);
    }
}
