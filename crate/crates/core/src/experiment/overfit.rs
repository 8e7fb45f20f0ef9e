//! Overfitting onset from the loss curves and from within-class stiffness.

use serde::{Deserialize, Serialize};

use super::EpochReport;
use crate::stiffness::{PairMode, StiffnessMetric};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OverfitConfig {
    pub metric: StiffnessMetric,
    pub mode: PairMode,
    /// Stiffness onset fires when within-class stiffness drops below this
    /// fraction of its running maximum.
    pub stiffness_fraction: f64,
}

impl Default for OverfitConfig {
    fn default() -> Self {
        Self {
            metric: StiffnessMetric::Cosine,
            mode: PairMode::TrainVal,
            stiffness_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverfitOnset {
    pub metric: StiffnessMetric,
    pub mode: PairMode,
    /// First checkpoint at which validation loss has risen over two
    /// consecutive checkpoints while training loss fell across them.
    pub loss_onset_epoch: Option<usize>,
    /// First checkpoint whose within-class stiffness is below
    /// `stiffness_fraction` × the running maximum.
    pub stiffness_onset_epoch: Option<usize>,
    pub peak_within: Option<f64>,
    pub final_within: Option<f64>,
    pub reason: Option<String>,
}

impl OverfitOnset {
    pub fn fired(&self) -> bool {
        self.loss_onset_epoch.is_some()
    }
}

pub fn detect_overfit_onset(reports: &[EpochReport], cfg: &OverfitConfig) -> OverfitOnset {
    let mut out = OverfitOnset {
        metric: cfg.metric,
        mode: cfg.mode,
        loss_onset_epoch: None,
        stiffness_onset_epoch: None,
        peak_within: None,
        final_within: None,
        reason: None,
    };
    // (epoch, train, val, within) for checkpoints carrying every signal
    let rows: Vec<(usize, f64, f64, f64)> = reports
        .iter()
        .filter_map(|r| Some((r.epoch, r.train_loss, r.val_loss?, r.within(cfg.metric, cfg.mode)?)))
        .collect();
    if rows.len() < 2 {
        out.reason = Some("insufficient data".into());
        return out;
    }
    out.loss_onset_epoch = rows.windows(3).find_map(|w| {
        let rising = w[2].2 > w[1].2 && w[1].2 > w[0].2;
        let training = w[2].1 < w[0].1;
        (rising && training).then_some(w[2].0)
    });
    let mut peak = f64::NEG_INFINITY;
    for &(epoch, _, _, within) in &rows {
        peak = peak.max(within);
        if out.stiffness_onset_epoch.is_none() && peak > 0.0 && within < cfg.stiffness_fraction * peak {
            out.stiffness_onset_epoch = Some(epoch);
        }
    }
    out.peak_within = Some(peak);
    out.final_within = rows.last().map(|r| r.3);
    if out.loss_onset_epoch.is_none() && out.stiffness_onset_epoch.is_none() {
        out.reason = Some("no onset detected".into());
    }
    out
}
