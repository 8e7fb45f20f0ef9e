//! Pair statistics over a gradient snapshot.
//!
//! The expensive part, the gradient Gram matrix, is computed once per
//! snapshot in square tiles that run in parallel. Every entry is an
//! independent [`crate::linalg::dot`], so the matrix is bitwise identical for
//! any worker count. All statistics are then accumulated sequentially from the
//! Gram matrix in a fixed pair order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::snapshot::{GradientSnapshot, Split};
use super::{PairMode, StiffnessError, StiffnessMetric};
use crate::linalg::{self, LineFit};

/// Number of equal-width distance bins over `[0, 2]` used for plotting.
pub const PROFILE_BINS: usize = 20;

const TILE: usize = 32;
const UNIT_TOL: f64 = 1e-6;

/// Mean of pair values with its standard error (sample std / √n).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std_err: Option<f64>,
    pub n: u64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Accum {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Accum {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn stat(&self) -> Option<Stat> {
        (self.n > 0).then(|| Stat {
            mean: self.mean,
            std_err: (self.n > 1)
                .then(|| (self.m2.max(0.0) / (self.n - 1) as f64 / self.n as f64).sqrt()),
            n: self.n,
        })
    }
}

/// Mean pair stiffness between classes. Cells without pairs are `None`.
///
/// For `train-val`, rows index the class of the training endpoint and columns
/// the class of the validation endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStiffnessMatrix {
    pub metric: StiffnessMetric,
    pub mode: PairMode,
    pub num_classes: usize,
    pub values: Vec<Vec<Option<f64>>>,
    pub std_errs: Vec<Vec<Option<f64>>>,
    pub pair_counts: Vec<Vec<u64>>,
}

impl ClassStiffnessMatrix {
    pub fn missing_cells(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (a, row) in self.values.iter().enumerate() {
            for (b, v) in row.iter().enumerate() {
                if v.is_none() {
                    out.push((a, b));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WithinBetween {
    pub within: f64,
    pub between: f64,
    pub within_std_err: Option<f64>,
    pub between_std_err: Option<f64>,
}

/// Mean of the diagonal cells and mean of the `Nc(Nc-1)` off-diagonal cells.
///
/// Standard errors treat cells as independent: `sqrt(Σ se²) / n_cells`.
pub fn within_between(matrix: &ClassStiffnessMatrix) -> Result<WithinBetween, StiffnessError> {
    let nc = matrix.num_classes;
    if nc < 2 {
        return Err(StiffnessError::TooFewClasses);
    }
    let missing = matrix.missing_cells();
    if !missing.is_empty() {
        return Err(StiffnessError::MissingCells(missing));
    }
    let (mut diag, mut off) = (0.0, 0.0);
    let (mut diag_var, mut off_var) = (Some(0.0), Some(0.0));
    for a in 0..nc {
        for b in 0..nc {
            let v = matrix.values[a][b].unwrap();
            let se = matrix.std_errs[a][b];
            let (sum, var) = if a == b {
                (&mut diag, &mut diag_var)
            } else {
                (&mut off, &mut off_var)
            };
            *sum += v;
            *var = var.zip(se).map(|(acc, s)| acc + s * s);
        }
    }
    let n_off = (nc * (nc - 1)) as f64;
    Ok(WithinBetween {
        within: diag / nc as f64,
        between: off / n_off,
        within_std_err: diag_var.map(|v| v.sqrt() / nc as f64),
        between_std_err: off_var.map(|v| v.sqrt() / n_off),
    })
}

/// The four nested-group means: same class; different classes in the same
/// super-class; different super-classes in the same super-super-class; and
/// all pairs of different classes as the baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchySummary {
    pub metric: StiffnessMetric,
    pub mode: PairMode,
    pub same_class: Option<Stat>,
    pub same_super_diff_class: Option<Stat>,
    pub same_ssc_diff_super: Option<Stat>,
    pub diff_class_baseline: Option<Stat>,
    /// Names of empty buckets.
    pub missing: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileSample {
    pub distance: f64,
    pub stiffness: f64,
}

/// Same-class `(input distance, stiffness)` samples, one per eligible pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceProfile {
    pub metric: StiffnessMetric,
    pub mode: PairMode,
    pub samples: Vec<ProfileSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileBin {
    pub lo: f64,
    pub hi: f64,
    pub mean: Option<f64>,
    pub std_err: Option<f64>,
    pub count: u64,
}

/// Equal-width bins over `[0, 2]`; distance 2 falls in the last bin.
pub fn bin_profile(profile: &DistanceProfile, bins: usize) -> Vec<ProfileBin> {
    let width = 2.0 / bins as f64;
    let mut acc = vec![Accum::default(); bins];
    for s in &profile.samples {
        let k = ((s.distance / width) as usize).min(bins - 1);
        acc[k].push(s.stiffness);
    }
    acc.iter()
        .enumerate()
        .map(|(k, a)| {
            let st = a.stat();
            ProfileBin {
                lo: k as f64 * width,
                hi: (k + 1) as f64 * width,
                mean: st.map(|s| s.mean),
                std_err: st.and_then(|s| s.std_err),
                count: a.n,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum XiInvalid {
    NoSamples,
    DegenerateFit,
    NonNegativeSlope,
    CrossingOutOfRange,
}

/// Zero crossing of the least-squares line through a distance profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XiEstimate {
    pub fit: Option<LineFit>,
    /// Set only when `valid`.
    pub xi: Option<f64>,
    /// `-intercept / slope` whenever the slope is non-zero, valid or not.
    pub crossing: Option<f64>,
    pub valid: bool,
    pub reason: Option<XiInvalid>,
}

impl XiEstimate {
    fn invalid(fit: Option<LineFit>, crossing: Option<f64>, reason: XiInvalid) -> Self {
        Self {
            fit,
            xi: None,
            crossing,
            valid: false,
            reason: Some(reason),
        }
    }
}

/// Fits the raw samples (no binning). Valid iff the slope is negative and the
/// crossing lies in `(0, 2]`.
pub fn estimate_xi(profile: &DistanceProfile) -> XiEstimate {
    if profile.samples.is_empty() {
        return XiEstimate::invalid(None, None, XiInvalid::NoSamples);
    }
    let pts: Vec<(f64, f64)> = profile
        .samples
        .iter()
        .map(|s| (s.distance, s.stiffness))
        .collect();
    let fit = match linalg::ols_fit(&pts) {
        Ok(f) => f,
        Err(_) => return XiEstimate::invalid(None, None, XiInvalid::DegenerateFit),
    };
    let crossing = (fit.slope != 0.0).then(|| -fit.intercept / fit.slope);
    if !(fit.slope < 0.0) {
        return XiEstimate::invalid(Some(fit), crossing, XiInvalid::NonNegativeSlope);
    }
    let xi = crossing.unwrap();
    if !(xi > 0.0 && xi <= 2.0) {
        return XiEstimate::invalid(Some(fit), crossing, XiInvalid::CrossingOutOfRange);
    }
    XiEstimate {
        fit: Some(fit),
        xi: Some(xi),
        crossing,
        valid: true,
        reason: None,
    }
}

/// `1 - cos(x1, x2)` for unit-norm inputs, clamped to `[0, 2]`.
pub fn input_distance(x1: &[f64], x2: &[f64]) -> Result<f64, StiffnessError> {
    let d12 = linalg::dot(x1, x2)?;
    let d11 = linalg::dot_unchecked(x1, x1);
    let d22 = linalg::dot_unchecked(x2, x2);
    for n2 in [d11, d22] {
        if (n2.sqrt() - 1.0).abs() > UNIT_TOL {
            return Err(StiffnessError::NonUnitInput(n2.sqrt()));
        }
    }
    Ok((1.0 - linalg::cosine_from_dots(d12, d11, d22, 0.0)).clamp(0.0, 2.0))
}

/// All configured statistics for one `(metric, mode)` at one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeAnalysis {
    pub metric: StiffnessMetric,
    pub mode: PairMode,
    pub within_between: Option<WithinBetween>,
    pub missing_cells: Vec<(usize, usize)>,
    pub class_matrix: ClassStiffnessMatrix,
    pub hierarchy: Option<HierarchySummary>,
    pub n_profile_samples: usize,
    pub profile_bins: Vec<ProfileBin>,
    pub xi: XiEstimate,
}

/// Symmetric `n × n` Gram matrix, tiled and parallel over tiles.
fn gram(vectors: &[&[f64]]) -> Vec<f64> {
    let n = vectors.len();
    let nt = n.div_ceil(TILE);
    let tiles: Vec<(usize, usize)> = (0..nt).flat_map(|a| (a..nt).map(move |b| (a, b))).collect();
    let blocks: Vec<Vec<f64>> = tiles
        .par_iter()
        .map(|&(ta, tb)| {
            let (ra, rb) = (ta * TILE..((ta + 1) * TILE).min(n), tb * TILE..((tb + 1) * TILE).min(n));
            let mut out = Vec::with_capacity(ra.len() * rb.len());
            for i in ra {
                for j in rb.clone() {
                    out.push(linalg::dot_unchecked(vectors[i], vectors[j]));
                }
            }
            out
        })
        .collect();
    let mut g = vec![0.0; n * n];
    for (&(ta, tb), block) in tiles.iter().zip(&blocks) {
        let (ra, rb) = (ta * TILE..((ta + 1) * TILE).min(n), tb * TILE..((tb + 1) * TILE).min(n));
        let w = rb.len();
        for (ii, i) in ra.enumerate() {
            for (jj, j) in rb.clone().enumerate() {
                let v = block[ii * w + jj];
                g[i * n + j] = v;
                g[j * n + i] = v;
            }
        }
    }
    g
}

/// Precomputed gradient Gram matrix for one snapshot.
pub struct Analyzer<'a> {
    snap: &'a GradientSnapshot,
    n: usize,
    dots: Vec<f64>,
    train: Vec<usize>,
    val: Vec<usize>,
}

impl<'a> Analyzer<'a> {
    pub fn new(snap: &'a GradientSnapshot) -> Result<Self, StiffnessError> {
        let p = snap.param_count();
        let d = snap.feature_dim();
        for r in &snap.records {
            if r.gradient.len() != p {
                return Err(linalg::LinalgError::Dimension {
                    left: p,
                    right: r.gradient.len(),
                }
                .into());
            }
            if r.features.len() != d {
                return Err(linalg::LinalgError::Dimension {
                    left: d,
                    right: r.features.len(),
                }
                .into());
            }
        }
        let grads: Vec<&[f64]> = snap.records.iter().map(|r| r.gradient.as_slice()).collect();
        Ok(Self {
            snap,
            n: grads.len(),
            dots: gram(&grads),
            train: snap.indices(Split::Train),
            val: snap.indices(Split::Val),
        })
    }

    pub fn snapshot(&self) -> &GradientSnapshot {
        self.snap
    }

    pub fn pair(&self, i: usize, j: usize, metric: StiffnessMetric) -> f64 {
        let n = self.n;
        metric.from_dots(self.dots[i * n + j], self.dots[i * n + i], self.dots[j * n + j])
    }

    /// Visits every eligible pair once as `(endpoint 1, endpoint 2)`, in a
    /// fixed order. Same-split modes yield unordered pairs `i < j`.
    pub fn for_each_pair(&self, mode: PairMode, mut f: impl FnMut(usize, usize)) {
        let same = |idx: &[usize], f: &mut dyn FnMut(usize, usize)| {
            for (a, &i) in idx.iter().enumerate() {
                for &j in &idx[a + 1..] {
                    f(i, j);
                }
            }
        };
        match mode {
            PairMode::TrainTrain => same(&self.train, &mut f),
            PairMode::ValVal => same(&self.val, &mut f),
            PairMode::TrainVal => {
                for &i in &self.train {
                    for &j in &self.val {
                        f(i, j);
                    }
                }
            }
        }
    }

    fn num_classes(&self) -> usize {
        let seen = self.snap.records.iter().map(|r| r.class_id + 1).max().unwrap_or(0);
        self.snap.meta.num_classes.max(seen)
    }

    pub fn class_matrix(&self, metric: StiffnessMetric, mode: PairMode) -> ClassStiffnessMatrix {
        let nc = self.num_classes();
        let mut acc = vec![Accum::default(); nc * nc];
        let recs = &self.snap.records;
        self.for_each_pair(mode, |i, j| {
            let (a, b) = (recs[i].class_id, recs[j].class_id);
            let s = self.pair(i, j, metric);
            acc[a * nc + b].push(s);
            if a != b && mode.is_symmetric() {
                acc[b * nc + a].push(s);
            }
        });
        let cell = |a: usize, b: usize| acc[a * nc + b].stat();
        ClassStiffnessMatrix {
            metric,
            mode,
            num_classes: nc,
            values: (0..nc)
                .map(|a| (0..nc).map(|b| cell(a, b).map(|s| s.mean)).collect())
                .collect(),
            std_errs: (0..nc)
                .map(|a| (0..nc).map(|b| cell(a, b).and_then(|s| s.std_err)).collect())
                .collect(),
            pair_counts: (0..nc)
                .map(|a| (0..nc).map(|b| acc[a * nc + b].n).collect())
                .collect(),
        }
    }

    pub fn hierarchy_summary(
        &self,
        metric: StiffnessMetric,
        mode: PairMode,
    ) -> Result<HierarchySummary, StiffnessError> {
        let recs = &self.snap.records;
        let ids: Vec<(usize, usize, usize)> = recs
            .iter()
            .map(|r| match (r.super_class_id, r.super_super_class_id) {
                (Some(sc), Some(ssc)) => Ok((r.class_id, sc, ssc)),
                _ => Err(StiffnessError::NoHierarchy),
            })
            .collect::<Result<_, _>>()?;
        let mut buckets = [Accum::default(); 4];
        self.for_each_pair(mode, |i, j| {
            let (c1, s1, ss1) = ids[i];
            let (c2, s2, ss2) = ids[j];
            let v = self.pair(i, j, metric);
            if c1 == c2 {
                buckets[0].push(v);
                return;
            }
            buckets[3].push(v);
            if s1 == s2 {
                buckets[1].push(v);
            } else if ss1 == ss2 {
                buckets[2].push(v);
            }
        });
        let names = [
            "same_class",
            "same_super_diff_class",
            "same_ssc_diff_super",
            "diff_class_baseline",
        ];
        let missing = names
            .iter()
            .zip(&buckets)
            .filter(|(_, b)| b.n == 0)
            .map(|(n, _)| n.to_string())
            .collect();
        Ok(HierarchySummary {
            metric,
            mode,
            same_class: buckets[0].stat(),
            same_super_diff_class: buckets[1].stat(),
            same_ssc_diff_super: buckets[2].stat(),
            diff_class_baseline: buckets[3].stat(),
            missing,
        })
    }

    pub fn distance_profile(
        &self,
        metric: StiffnessMetric,
        mode: PairMode,
    ) -> Result<DistanceProfile, StiffnessError> {
        let recs = &self.snap.records;
        let mut samples = Vec::new();
        let mut err = None;
        self.for_each_pair(mode, |i, j| {
            if err.is_some() || recs[i].class_id != recs[j].class_id {
                return;
            }
            match input_distance(&recs[i].features, &recs[j].features) {
                Ok(distance) => samples.push(ProfileSample {
                    distance,
                    stiffness: self.pair(i, j, metric),
                }),
                Err(e) => err = Some(e),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if samples.is_empty() {
            return Err(StiffnessError::NoPairs(format!(
                "same-class {} pairs",
                mode.name()
            )));
        }
        Ok(DistanceProfile {
            metric,
            mode,
            samples,
        })
    }

    /// Class matrix, summaries, binned profile and ξ for one `(metric, mode)`.
    ///
    /// Missing cells, empty buckets and absent same-class pairs are reported
    /// in the result rather than raised.
    pub fn analyze(
        &self,
        metric: StiffnessMetric,
        mode: PairMode,
        with_hierarchy: bool,
    ) -> Result<ModeAnalysis, StiffnessError> {
        let class_matrix = self.class_matrix(metric, mode);
        let missing_cells = class_matrix.missing_cells();
        let within_between = within_between(&class_matrix).ok();
        let hierarchy = if with_hierarchy {
            Some(self.hierarchy_summary(metric, mode)?)
        } else {
            None
        };
        let (n_profile_samples, profile_bins, xi) = match self.distance_profile(metric, mode) {
            Ok(p) => (p.samples.len(), bin_profile(&p, PROFILE_BINS), estimate_xi(&p)),
            Err(StiffnessError::NoPairs(_)) => (
                0,
                bin_profile(
                    &DistanceProfile {
                        metric,
                        mode,
                        samples: vec![],
                    },
                    PROFILE_BINS,
                ),
                XiEstimate::invalid(None, None, XiInvalid::NoSamples),
            ),
            Err(e) => return Err(e),
        };
        Ok(ModeAnalysis {
            metric,
            mode,
            within_between,
            missing_cells,
            class_matrix,
            hierarchy,
            n_profile_samples,
            profile_bins,
            xi,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::snapshot::{GradientRecord, SnapshotMeta};
    use super::*;

    fn rec(g: Vec<f64>, class: usize, split: Split, x: Vec<f64>) -> GradientRecord {
        GradientRecord {
            gradient: g,
            loss: 1.0,
            class_id: class,
            super_class_id: Some(class),
            super_super_class_id: Some(0),
            split,
            features: x,
        }
    }

    fn meta(nc: usize) -> SnapshotMeta {
        SnapshotMeta {
            epoch: 0,
            train_loss: 1.0,
            val_loss: None,
            learning_rate: 1e-3,
            weights_hash: String::new(),
            num_classes: nc,
        }
    }

    fn unit(theta: f64) -> Vec<f64> {
        vec![theta.cos(), theta.sin()]
    }

    #[test]
    fn identical_gradients_give_all_ones() {
        let g = vec![0.5, -1.0, 2.0];
        let records = (0..8)
            .map(|i| rec(g.clone(), i % 2, if i < 4 { Split::Train } else { Split::Val }, unit(i as f64)))
            .collect();
        let snap = GradientSnapshot {
            meta: meta(2),
            records,
        };
        let an = Analyzer::new(&snap).unwrap();
        for metric in StiffnessMetric::ALL {
            for mode in PairMode::ALL {
                let m = an.class_matrix(metric, mode);
                for row in &m.values {
                    for v in row {
                        assert_eq!(*v, Some(1.0), "{metric:?} {mode:?}");
                    }
                }
            }
            let h = an.hierarchy_summary(metric, PairMode::TrainTrain).unwrap();
            assert_eq!(h.same_class.unwrap().mean, 1.0);
            assert_eq!(h.diff_class_baseline.unwrap().mean, 1.0);
            // each class is its own super-class
            assert!(h.same_super_diff_class.is_none());
            assert!(h.missing.contains(&"same_super_diff_class".to_string()));
        }
    }

    #[test]
    fn opposite_class_gradients() {
        let g = vec![1.0, 2.0];
        let ng = vec![-1.0, -2.0];
        let records = (0..6)
            .map(|i| {
                let class = i % 2;
                rec(if class == 0 { g.clone() } else { ng.clone() }, class, Split::Train, unit(0.1 * i as f64))
            })
            .collect();
        let snap = GradientSnapshot {
            meta: meta(2),
            records,
        };
        let an = Analyzer::new(&snap).unwrap();
        let m = an.class_matrix(StiffnessMetric::Cosine, PairMode::TrainTrain);
        assert_eq!(m.values, vec![vec![Some(1.0), Some(-1.0)], vec![Some(-1.0), Some(1.0)]]);
        // 3 per class: 3 within pairs, 9 across
        assert_eq!(m.pair_counts, vec![vec![3, 9], vec![9, 3]]);
        let wb = within_between(&m).unwrap();
        assert_eq!((wb.within, wb.between), (1.0, -1.0));
        // no validation records
        let tv = an.class_matrix(StiffnessMetric::Cosine, PairMode::TrainVal);
        assert_eq!(tv.missing_cells().len(), 4);
        assert!(matches!(within_between(&tv), Err(StiffnessError::MissingCells(c)) if c.len() == 4));
    }

    fn matrix(values: Vec<Vec<f64>>) -> ClassStiffnessMatrix {
        let nc = values.len();
        ClassStiffnessMatrix {
            metric: StiffnessMetric::Cosine,
            mode: PairMode::TrainTrain,
            num_classes: nc,
            values: values.iter().map(|r| r.iter().map(|&v| Some(v)).collect()).collect(),
            std_errs: vec![vec![None; nc]; nc],
            pair_counts: vec![vec![1; nc]; nc],
        }
    }

    #[test]
    fn within_between_arithmetic() {
        let wb = within_between(&matrix(vec![vec![1.0, 0.2], vec![0.4, 1.0]])).unwrap();
        assert!((wb.between - 0.3).abs() < 1e-15);
        assert_eq!(wb.within, 1.0);
        let id = within_between(&matrix(vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]))
        .unwrap();
        assert_eq!((id.within, id.between), (1.0, 0.0));
        assert!(matches!(
            within_between(&matrix(vec![vec![1.0]])),
            Err(StiffnessError::TooFewClasses)
        ));
    }

    #[test]
    fn input_distance_identities() {
        let x = unit(0.7);
        let nx: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(input_distance(&x, &x).unwrap(), 0.0);
        assert_eq!(input_distance(&x, &nx).unwrap(), 2.0);
        let d = input_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(d, 1.0);
        assert!(matches!(
            input_distance(&[2.0, 0.0], &[1.0, 0.0]),
            Err(StiffnessError::NonUnitInput(_))
        ));
    }

    fn profile(points: &[(f64, f64)]) -> DistanceProfile {
        DistanceProfile {
            metric: StiffnessMetric::Cosine,
            mode: PairMode::TrainTrain,
            samples: points
                .iter()
                .map(|&(distance, stiffness)| ProfileSample { distance, stiffness })
                .collect(),
        }
    }

    #[test]
    fn xi_examples() {
        let line: Vec<(f64, f64)> = (0..50).map(|i| (i as f64 * 0.04, 1.0 - i as f64 * 0.04)).collect();
        let e = estimate_xi(&profile(&line));
        assert!(e.valid);
        assert!((e.xi.unwrap() - 1.0).abs() < 1e-9);
        assert!((e.fit.unwrap().slope + 1.0).abs() < 1e-9);

        let flat: Vec<(f64, f64)> = (0..10).map(|i| (i as f64 * 0.1, 0.5)).collect();
        let e = estimate_xi(&profile(&flat));
        assert_eq!(e.reason, Some(XiInvalid::NonNegativeSlope));
        assert!(!e.valid && e.xi.is_none());

        let l2: Vec<(f64, f64)> = (0..30).map(|i| {
            let d = i as f64 / 15.0;
            (d, 0.8 - 0.5 * d)
        }).collect();
        assert!((estimate_xi(&profile(&l2)).xi.unwrap() - 1.6).abs() <= 1e-9);

        // crosses at 4
        let far: Vec<(f64, f64)> = (0..10).map(|i| (i as f64 * 0.1, 1.0 - 0.25 * i as f64 * 0.1)).collect();
        let e = estimate_xi(&profile(&far));
        assert_eq!(e.reason, Some(XiInvalid::CrossingOutOfRange));
        assert!((e.crossing.unwrap() - 4.0).abs() < 1e-9);

        let same_x = estimate_xi(&profile(&[(0.5, 0.1), (0.5, 0.3)]));
        assert_eq!(same_x.reason, Some(XiInvalid::DegenerateFit));
        assert_eq!(estimate_xi(&profile(&[])).reason, Some(XiInvalid::NoSamples));
    }

    #[test]
    fn distance_profile_counts_and_errors() {
        // 5 examples of class 0, 1 of class 1
        let records: Vec<GradientRecord> = (0..6)
            .map(|i| rec(vec![1.0, i as f64], if i < 5 { 0 } else { 1 }, Split::Train, unit(0.3 * i as f64)))
            .collect();
        let snap = GradientSnapshot {
            meta: meta(2),
            records,
        };
        let an = Analyzer::new(&snap).unwrap();
        let p = an.distance_profile(StiffnessMetric::Cosine, PairMode::TrainTrain).unwrap();
        assert_eq!(p.samples.len(), 10);
        assert!(matches!(
            an.distance_profile(StiffnessMetric::Cosine, PairMode::ValVal),
            Err(StiffnessError::NoPairs(_))
        ));
        let bins = bin_profile(&p, PROFILE_BINS);
        assert_eq!(bins.len(), PROFILE_BINS);
        assert_eq!(bins.iter().map(|b| b.count).sum::<u64>(), 10);
    }

    #[test]
    fn one_example_per_class_has_no_profile() {
        let records = (0..3)
            .map(|i| rec(vec![1.0, i as f64], i, Split::Train, unit(i as f64)))
            .collect();
        let snap = GradientSnapshot {
            meta: meta(3),
            records,
        };
        let an = Analyzer::new(&snap).unwrap();
        assert!(an.distance_profile(StiffnessMetric::Sign, PairMode::TrainTrain).is_err());
        let a = an.analyze(StiffnessMetric::Sign, PairMode::TrainTrain, true).unwrap();
        assert_eq!(a.xi.reason, Some(XiInvalid::NoSamples));
        assert_eq!(a.missing_cells, vec![(0, 0), (1, 1), (2, 2)]);
        assert!(a.within_between.is_none());
    }

    #[test]
    fn gram_tiles_match_direct_dots() {
        let vs: Vec<Vec<f64>> = (0..70)
            .map(|i| (0..9).map(|k| ((i * 7 + k * 3) % 11) as f64 - 5.0).collect())
            .collect();
        let refs: Vec<&[f64]> = vs.iter().map(|v| v.as_slice()).collect();
        let g = gram(&refs);
        for i in 0..70 {
            for j in 0..70 {
                assert_eq!(g[i * 70 + j], linalg::dot(&vs[i], &vs[j]).unwrap());
            }
        }
    }
}
