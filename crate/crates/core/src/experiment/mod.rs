//! Training runs with periodic frozen-weight analysis, learning-rate sweeps
//! and overfitting-onset detection.
//!
//! A run trains with Adam and, at epoch 0 and every `cadence` epochs (and at
//! the last epoch), evaluates per-example gradients on a fixed evaluation
//! subset and computes every configured `(metric, mode)` statistic. Analysis
//! only reads the parameters, so it never changes the training trajectory.

mod output;
mod overfit;
mod sweep;

pub use output::{
    analyze_snapshot_file, load_reports, log_event, summarize, write_figure_data, write_run_outputs,
    write_sweep_outputs, AnalysisReport, ReportFile, SCHEMA_VERSION,
};
pub use overfit::{detect_overfit_onset, OverfitConfig, OverfitOnset};
pub use sweep::{
    assemble_sweep, matched_curves, run_sweep, MatchedCurves, SweepReport, XiCurve, XiPoint,
    MATCH_GRID_POINTS,
};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    load_idx, make_eval_subset, synth_hierarchy, Dataset, DatasetError, EvalSubset, SynthConfig,
};
use crate::model::{train_epoch, AdamConfig, AdamState, MlpParams, MlpSpec, ModelError};
use crate::stiffness::{
    collect_snapshot, write_snapshot, Analyzer, ModeAnalysis, PairMode, SnapshotMeta,
    StiffnessError, StiffnessMetric,
};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stiffness(#[from] StiffnessError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {path}: {detail}")]
    Json { path: String, detail: String },
    #[error("csv error on {path}: {detail}")]
    Csv { path: String, detail: String },
    #[error("report schema error: {0}")]
    Schema(String),
    #[error("no input")]
    NoInput,
}

impl ExperimentError {
    /// True when the underlying failure is a non-finite loss.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Self::Model(ModelError::NonFinite(_))
                | Self::Stiffness(StiffnessError::Model(ModelError::NonFinite(_)))
        )
    }
}

pub(crate) fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Where the data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SynthConfig),
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        val_images: PathBuf,
        val_labels: PathBuf,
        num_classes: usize,
        #[serde(default)]
        max_train: Option<usize>,
        #[serde(default)]
        max_val: Option<usize>,
    },
    Json {
        path: PathBuf,
    },
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset, ExperimentError> {
        match self {
            Self::Synthetic(cfg) => Ok(synth_hierarchy(cfg)?),
            Self::Idx {
                train_images,
                train_labels,
                val_images,
                val_labels,
                num_classes,
                max_train,
                max_val,
            } => {
                let mut train = load_idx(train_images, train_labels)?;
                let mut val = load_idx(val_images, val_labels)?;
                if let Some(n) = max_train {
                    train.truncate(*n);
                }
                if let Some(n) = max_val {
                    val.truncate(*n);
                }
                Ok(Dataset::from_raw(&train, &val, *num_classes, None)?)
            }
            Self::Json { path } => Ok(Dataset::load_json(path)?.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub init: u64,
    pub shuffle: u64,
    pub subset: u64,
}

impl Seeds {
    pub fn from_base(base: u64) -> Self {
        Self {
            init: base,
            shuffle: base.wrapping_add(1),
            subset: base.wrapping_add(2),
        }
    }

    /// Shuffle seed for a given epoch.
    pub fn epoch_shuffle(&self, epoch: usize) -> u64 {
        self.shuffle
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(epoch as u64)
    }
}

impl Default for Seeds {
    fn default() -> Self {
        Self::from_base(0)
    }
}

fn default_hidden() -> Vec<usize> {
    vec![500, 300, 100]
}
fn default_batch() -> usize {
    32
}
fn default_cadence() -> usize {
    1
}
fn default_metrics() -> Vec<StiffnessMetric> {
    StiffnessMetric::ALL.to_vec()
}
fn default_modes() -> Vec<PairMode> {
    PairMode::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    /// Hidden widths; input and output sizes come from the dataset.
    #[serde(default = "default_hidden")]
    pub hidden_layers: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub eval_train: usize,
    pub eval_val: usize,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<StiffnessMetric>,
    #[serde(default = "default_modes")]
    pub modes: Vec<PairMode>,
    /// Analyze every `cadence` epochs (epoch 0 and the last epoch always).
    #[serde(default = "default_cadence")]
    pub cadence: usize,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub overfit: OverfitConfig,
    #[serde(default)]
    pub save_snapshots: bool,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Config(m.to_string()));
        if self.learning_rates.is_empty() {
            return bad("learning_rates must not be empty");
        }
        if self.learning_rates.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            return bad("learning rates must be positive and finite");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.cadence == 0 {
            return bad("cadence must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.metrics.is_empty() || self.modes.is_empty() {
            return bad("metrics and modes must not be empty");
        }
        if self.hidden_layers.contains(&0) {
            return bad("hidden layer widths must be >= 1");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io_error(path))?;
        serde_json::from_str(&text).map_err(|e| ExperimentError::Json {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }

    pub fn is_checkpoint(&self, epoch: usize) -> bool {
        epoch % self.cadence == 0 || epoch == self.epochs
    }
}

/// Analysis results at one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean loss over the full training split at the frozen weights.
    pub train_loss: f64,
    /// Mean loss over the full validation split at the frozen weights.
    pub val_loss: Option<f64>,
    /// Running mean loss seen while training this epoch; absent at epoch 0.
    pub epoch_mean_loss: Option<f64>,
    pub weights_hash: String,
    pub analyses: Vec<ModeAnalysis>,
}

impl EpochReport {
    pub fn analysis(&self, metric: StiffnessMetric, mode: PairMode) -> Option<&ModeAnalysis> {
        self.analyses
            .iter()
            .find(|a| a.metric == metric && a.mode == mode)
    }

    pub fn within(&self, metric: StiffnessMetric, mode: PairMode) -> Option<f64> {
        self.analysis(metric, mode)
            .and_then(|a| a.within_between)
            .map(|wb| wb.within)
    }

    pub fn between(&self, metric: StiffnessMetric, mode: PairMode) -> Option<f64> {
        self.analysis(metric, mode)
            .and_then(|a| a.within_between)
            .map(|wb| wb.between)
    }

    pub fn xi(&self, metric: StiffnessMetric, mode: PairMode) -> Option<f64> {
        self.analysis(metric, mode).and_then(|a| a.xi.xi)
    }
}

/// All checkpoints of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub kind: String,
    pub learning_rate: f64,
    pub layer_sizes: Vec<usize>,
    pub seeds: Seeds,
    pub eval_subset: EvalSubset,
    pub reports: Vec<EpochReport>,
    pub overfit: OverfitOnset,
}

/// Dataset, evaluation subset and model shape shared by every run of a config.
pub struct Prepared {
    pub dataset: Dataset,
    pub subset: EvalSubset,
    pub spec: MlpSpec,
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared, ExperimentError> {
    config.validate()?;
    let dataset = config.dataset.load()?;
    let subset = make_eval_subset(&dataset, config.eval_train, config.eval_val, config.seeds.subset)?;
    let mut sizes = vec![dataset.input_dim()];
    sizes.extend(&config.hidden_layers);
    sizes.push(dataset.num_classes);
    let spec = MlpSpec::new(sizes)?;
    Ok(Prepared {
        dataset,
        subset,
        spec,
    })
}

fn checkpoint(
    config: &ExperimentConfig,
    prepared: &Prepared,
    params: &MlpParams,
    epoch: usize,
    lr: f64,
    epoch_mean_loss: Option<f64>,
    snapshot_dir: Option<&Path>,
) -> Result<EpochReport, ExperimentError> {
    let ds = &prepared.dataset;
    let train_loss = params.mean_loss(&ds.train)?;
    let val_loss = if ds.validation.is_empty() {
        None
    } else {
        Some(params.mean_loss(&ds.validation)?)
    };
    let meta = SnapshotMeta {
        epoch,
        train_loss,
        val_loss,
        learning_rate: lr,
        weights_hash: String::new(),
        num_classes: ds.num_classes,
    };
    let snap = collect_snapshot(params, ds, &prepared.subset, meta)?;
    if let Some(dir) = snapshot_dir {
        write_snapshot(&dir.join(format!("epoch_{epoch:04}.snap")), &snap)?;
    }
    let analyzer = Analyzer::new(&snap)?;
    let mut analyses = Vec::with_capacity(config.metrics.len() * config.modes.len());
    for &metric in &config.metrics {
        for &mode in &config.modes {
            analyses.push(analyzer.analyze(metric, mode, ds.hierarchy.is_some())?);
        }
    }
    Ok(EpochReport {
        epoch,
        train_loss,
        val_loss,
        epoch_mean_loss,
        weights_hash: snap.meta.weights_hash.clone(),
        analyses,
    })
}

/// Trains one model at `lr`, analyzing at every checkpoint.
pub fn run_with(
    config: &ExperimentConfig,
    prepared: &Prepared,
    lr: f64,
    snapshot_dir: Option<&Path>,
) -> Result<RunReport, ExperimentError> {
    if let Some(dir) = snapshot_dir {
        fs::create_dir_all(dir).map_err(io_error(dir))?;
    }
    let mut params = MlpParams::init(prepared.spec.clone(), config.seeds.init)?;
    let mut adam = AdamState::new(params.len(), AdamConfig::with_lr(lr));
    let mut reports = vec![checkpoint(config, prepared, &params, 0, lr, None, snapshot_dir)?];
    for epoch in 1..=config.epochs {
        let mean = train_epoch(
            &mut params,
            &mut adam,
            &prepared.dataset.train,
            config.batch_size,
            config.seeds.epoch_shuffle(epoch),
        )?;
        if config.is_checkpoint(epoch) {
            reports.push(checkpoint(
                config,
                prepared,
                &params,
                epoch,
                lr,
                Some(mean),
                snapshot_dir,
            )?);
        }
    }
    let overfit = detect_overfit_onset(&reports, &config.overfit);
    Ok(RunReport {
        schema_version: SCHEMA_VERSION,
        kind: "run".into(),
        learning_rate: lr,
        layer_sizes: prepared.spec.layer_sizes.clone(),
        seeds: config.seeds,
        eval_subset: prepared.subset.clone(),
        reports,
        overfit,
    })
}

/// Final parameters of a run without any analysis, for comparisons.
pub fn train_only(config: &ExperimentConfig, prepared: &Prepared, lr: f64) -> Result<MlpParams, ExperimentError> {
    let mut params = MlpParams::init(prepared.spec.clone(), config.seeds.init)?;
    let mut adam = AdamState::new(params.len(), AdamConfig::with_lr(lr));
    for epoch in 1..=config.epochs {
        train_epoch(
            &mut params,
            &mut adam,
            &prepared.dataset.train,
            config.batch_size,
            config.seeds.epoch_shuffle(epoch),
        )?;
    }
    Ok(params)
}

/// Runs the first configured learning rate and writes outputs when
/// `output_dir` is set.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport, ExperimentError> {
    let prepared = prepare(config)?;
    let snap_dir = config
        .output_dir
        .as_ref()
        .filter(|_| config.save_snapshots)
        .map(|d| d.join("snapshots"));
    let run = run_with(config, &prepared, config.learning_rates[0], snap_dir.as_deref())?;
    if let Some(dir) = &config.output_dir {
        write_run_outputs(dir, &run)?;
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetSource::Synthetic(SynthConfig::new(2, 1, 2, 8, 12, (3.0, 1.5, 1.0), 5)),
            hidden_layers: vec![10],
            learning_rates: vec![5e-3],
            epochs: 4,
            batch_size: 8,
            eval_train: 16,
            eval_val: 16,
            metrics: default_metrics(),
            modes: default_modes(),
            cadence: 1,
            seeds: Seeds::from_base(3),
            overfit: OverfitConfig::default(),
            save_snapshots: false,
            output_dir: None,
        }
    }

    #[test]
    fn reports_every_epoch_plus_epoch_zero() {
        let run = run_experiment(&tiny_config()).unwrap();
        let epochs: Vec<usize> = run.reports.iter().map(|r| r.epoch).collect();
        assert_eq!(epochs, vec![0, 1, 2, 3, 4]);
        assert_eq!(run.reports[0].analyses.len(), 6);
        assert!(run.reports[0].epoch_mean_loss.is_none());
        for r in &run.reports {
            assert!(r.train_loss.is_finite() && r.val_loss.unwrap().is_finite());
            for a in &r.analyses {
                let wb = a.within_between.unwrap();
                assert!((-1.0..=1.0).contains(&wb.within) && (-1.0..=1.0).contains(&wb.between));
                assert!(a.hierarchy.is_some());
            }
        }
    }

    #[test]
    fn cadence_keeps_last_epoch() {
        let mut cfg = tiny_config();
        cfg.epochs = 5;
        cfg.cadence = 2;
        let run = run_experiment(&cfg).unwrap();
        let epochs: Vec<usize> = run.reports.iter().map(|r| r.epoch).collect();
        assert_eq!(epochs, vec![0, 2, 4, 5]);
    }

    #[test]
    fn analysis_does_not_perturb_training() {
        let mut cfg = tiny_config();
        let prepared = prepare(&cfg).unwrap();
        let run = run_with(&cfg, &prepared, 5e-3, None).unwrap();
        cfg.cadence = 1000;
        let sparse = run_with(&cfg, &prepared, 5e-3, None).unwrap();
        let plain = train_only(&cfg, &prepared, 5e-3).unwrap();
        assert_eq!(run.reports.last().unwrap().weights_hash, plain.weights_hash());
        assert_eq!(sparse.reports.last().unwrap().weights_hash, plain.weights_hash());
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config();
        cfg.learning_rates.clear();
        assert!(matches!(run_experiment(&cfg), Err(ExperimentError::Config(_))));
        let mut cfg = tiny_config();
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.learning_rates = vec![-1.0];
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.cadence = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_json_defaults_and_unknown_keys() {
        let text = r#"{
            "dataset": {"kind": "json", "path": "d.json"},
            "learning_rates": [0.001],
            "epochs": 3,
            "eval_train": 10,
            "eval_val": 10
        }"#;
        let cfg: ExperimentConfig = serde_json::from_str(text).unwrap();
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.hidden_layers, vec![500, 300, 100]);
        assert_eq!(cfg.modes.len(), 3);
        let bad = text.replace("\"epochs\"", "\"epoch_count\"");
        assert!(serde_json::from_str::<ExperimentConfig>(&bad).is_err());
    }
}
