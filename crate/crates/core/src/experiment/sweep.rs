//! Learning-rate sweeps and train-loss matched ξ curves.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::output::{write_sweep_outputs, SCHEMA_VERSION};
use super::{prepare, run_with, ExperimentConfig, ExperimentError, RunReport};
use crate::stiffness::{PairMode, StiffnessMetric};

/// Number of points on the common train-loss grid.
pub const MATCH_GRID_POINTS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XiPoint {
    pub epoch: usize,
    pub train_loss: f64,
    pub xi: Option<f64>,
    pub valid: bool,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
}

/// ξ at every checkpoint of one run; read as ξ-vs-epoch or ξ-vs-train-loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XiCurve {
    pub metric: StiffnessMetric,
    pub mode: PairMode,
    pub learning_rate: f64,
    pub points: Vec<XiPoint>,
}

impl XiCurve {
    pub fn from_run(run: &RunReport, metric: StiffnessMetric, mode: PairMode) -> Self {
        let points = run
            .reports
            .iter()
            .filter_map(|r| {
                let a = r.analysis(metric, mode)?;
                Some(XiPoint {
                    epoch: r.epoch,
                    train_loss: r.train_loss,
                    xi: a.xi.xi,
                    valid: a.xi.valid,
                    slope: a.xi.fit.map(|f| f.slope),
                    intercept: a.xi.fit.map(|f| f.intercept),
                })
            })
            .collect();
        Self {
            metric,
            mode,
            learning_rate: run.learning_rate,
            points,
        }
    }

    /// ξ linearly interpolated at `loss` between the first pair of
    /// consecutive checkpoints whose train losses bracket it. None when no
    /// pair brackets it or either endpoint has no valid ξ.
    pub fn interpolate(&self, loss: f64) -> Option<f64> {
        self.points.windows(2).find_map(|w| {
            let (a, b) = (&w[0], &w[1]);
            let (lo, hi) = if a.train_loss <= b.train_loss {
                (a.train_loss, b.train_loss)
            } else {
                (b.train_loss, a.train_loss)
            };
            if !(lo <= loss && loss <= hi) {
                return None;
            }
            let (xa, xb) = (a.xi?, b.xi?);
            if hi == lo {
                return Some(0.5 * (xa + xb));
            }
            let t = (loss - a.train_loss) / (b.train_loss - a.train_loss);
            Some(xa + t * (xb - xa))
        })
    }

    fn valid_loss_range(&self) -> Option<(f64, f64)> {
        self.points
            .iter()
            .filter(|p| p.valid)
            .map(|p| p.train_loss)
            .fold(None, |acc, l| match acc {
                None => Some((l, l)),
                Some((lo, hi)) => Some((lo.min(l), hi.max(l))),
            })
    }
}

/// ξ of several runs resampled onto one geometric train-loss grid spanning
/// the loss range every run covers with valid estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedCurves {
    pub metric: StiffnessMetric,
    pub mode: PairMode,
    pub grid: Vec<f64>,
    pub learning_rates: Vec<f64>,
    /// `xi[r][k]`: run `r` at grid point `k`.
    pub xi: Vec<Vec<Option<f64>>>,
}

pub fn matched_curves(curves: &[XiCurve], points: usize) -> MatchedCurves {
    let (metric, mode) = curves
        .first()
        .map(|c| (c.metric, c.mode))
        .unwrap_or((StiffnessMetric::Cosine, PairMode::TrainVal));
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    let mut covered = !curves.is_empty();
    for c in curves {
        match c.valid_loss_range() {
            Some((a, b)) => {
                lo = lo.max(a);
                hi = hi.min(b);
            }
            None => covered = false,
        }
    }
    let grid = if covered && lo > 0.0 && lo < hi && points >= 2 {
        let ratio = (hi / lo).ln() / (points - 1) as f64;
        let mut g: Vec<f64> = (0..points).map(|k| lo * (ratio * k as f64).exp()).collect();
        g[0] = lo;
        g[points - 1] = hi;
        g
    } else {
        Vec::new()
    };
    let xi = curves
        .iter()
        .map(|c| grid.iter().map(|&l| c.interpolate(l)).collect())
        .collect();
    MatchedCurves {
        metric,
        mode,
        learning_rates: curves.iter().map(|c| c.learning_rate).collect(),
        grid,
        xi,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub kind: String,
    pub learning_rates: Vec<f64>,
    pub runs: Vec<RunReport>,
    pub curves: Vec<XiCurve>,
    pub matched: Vec<MatchedCurves>,
}

impl SweepReport {
    pub fn matched(&self, metric: StiffnessMetric, mode: PairMode) -> Option<&MatchedCurves> {
        self.matched.iter().find(|m| m.metric == metric && m.mode == mode)
    }
}

pub fn assemble_sweep(runs: Vec<RunReport>, metrics: &[StiffnessMetric], modes: &[PairMode]) -> SweepReport {
    let mut curves = Vec::new();
    let mut matched = Vec::new();
    for &metric in metrics {
        for &mode in modes {
            let group: Vec<XiCurve> = runs.iter().map(|r| XiCurve::from_run(r, metric, mode)).collect();
            matched.push(matched_curves(&group, MATCH_GRID_POINTS));
            curves.extend(group);
        }
    }
    SweepReport {
        schema_version: SCHEMA_VERSION,
        kind: "sweep".into(),
        learning_rates: runs.iter().map(|r| r.learning_rate).collect(),
        runs,
        curves,
        matched,
    }
}

/// One run per learning rate with shared seeds and evaluation subset. Runs
/// execute in parallel; results are kept in configuration order.
pub fn run_sweep(config: &ExperimentConfig) -> Result<SweepReport, ExperimentError> {
    if config.learning_rates.len() < 2 {
        return Err(ExperimentError::Config(
            "a sweep needs at least 2 learning rates".into(),
        ));
    }
    let prepared = prepare(config)?;
    let snap_root = config
        .output_dir
        .as_ref()
        .filter(|_| config.save_snapshots)
        .map(|d| d.join("snapshots"));
    let runs = config
        .learning_rates
        .par_iter()
        .enumerate()
        .map(|(i, &lr)| {
            let dir = snap_root.as_ref().map(|d| d.join(format!("lr_{i:02}")));
            run_with(config, &prepared, lr, dir.as_deref())
        })
        .collect::<Result<Vec<_>, _>>()?;
    let sweep = assemble_sweep(runs, &config.metrics, &config.modes);
    if let Some(dir) = &config.output_dir {
        write_sweep_outputs(Path::new(dir), &sweep)?;
    }
    Ok(sweep)
}
