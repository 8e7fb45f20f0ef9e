//! Random snapshots and naive double-loop oracles shared by integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stiffkit::stiffness::{
    within_between, Analyzer, GradientRecord, GradientSnapshot, PairMode, SnapshotMeta, Split, StiffnessMetric,
};

macro_rules! ensure {
    ($cond:expr) => {
        if !$cond {
            return Err(format!("failed: {}", stringify!($cond)));
        }
    };
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

macro_rules! ensure_eq {
    ($a:expr, $b:expr) => {
        if $a != $b {
            return Err(format!("{:?} != {:?}", $a, $b));
        }
    };
}

pub fn random_snapshot(seed: u64, max_n: usize, max_p: usize) -> GradientSnapshot {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(8..=max_n);
    let p = rng.random_range(2..=max_p);
    let d = rng.random_range(2..=12);
    let nc = rng.random_range(2..=5);
    let records = (0..n)
        .map(|i| {
            let class_id = if i < 2 * nc { i % nc } else { rng.random_range(0..nc) };
            let split = if i < nc {
                Split::Train
            } else if i < 2 * nc {
                Split::Val
            } else if rng.random_bool(0.5) {
                Split::Train
            } else {
                Split::Val
            };
            let mut x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            x.iter_mut().for_each(|v| *v /= norm);
            // a few exact zero gradients exercise the eps path
            let zero = rng.random_bool(0.03);
            GradientRecord {
                gradient: (0..p)
                    .map(|_| if zero { 0.0 } else { rng.random_range(-1.0..1.0) })
                    .collect(),
                loss: rng.random_range(0.0..3.0),
                class_id,
                super_class_id: Some(class_id / 2),
                super_super_class_id: Some(class_id / 4),
                split,
                features: x,
            }
        })
        .collect();
    GradientSnapshot {
        meta: SnapshotMeta {
            epoch: 0,
            train_loss: 1.0,
            val_loss: Some(1.0),
            learning_rate: 1e-3,
            weights_hash: "00000000deadbeef".into(),
            num_classes: nc,
        },
        records,
    }
}

pub fn naive_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn naive_pair(a: &[f64], b: &[f64], metric: StiffnessMetric) -> f64 {
    let na = naive_dot(a, a).sqrt();
    let nb = naive_dot(b, b).sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    let ab = naive_dot(a, b);
    match metric {
        StiffnessMetric::Sign => {
            if ab > 0.0 {
                1.0
            } else if ab < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        StiffnessMetric::Cosine => (ab / (na * nb)).clamp(-1.0, 1.0),
    }
}

/// Every eligible ordered pair `(i, j)` of the mode, self-pairs excluded.
pub fn naive_pairs(snap: &GradientSnapshot, mode: PairMode) -> Vec<(usize, usize)> {
    let n = snap.records.len();
    let split = |i: usize| snap.records[i].split;
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let ok = match mode {
                PairMode::TrainTrain => split(i) == Split::Train && split(j) == Split::Train && i < j,
                PairMode::ValVal => split(i) == Split::Val && split(j) == Split::Val && i < j,
                PairMode::TrainVal => split(i) == Split::Train && split(j) == Split::Val,
            };
            if ok {
                out.push((i, j));
            }
        }
    }
    out
}

/// `cells[a][b]` = list of pair values for class pair (a, b).
pub fn naive_cells(snap: &GradientSnapshot, metric: StiffnessMetric, mode: PairMode) -> Vec<Vec<Vec<f64>>> {
    let nc = snap.meta.num_classes;
    let mut cells = vec![vec![Vec::new(); nc]; nc];
    for (i, j) in naive_pairs(snap, mode) {
        let (ri, rj) = (&snap.records[i], &snap.records[j]);
        let v = naive_pair(&ri.gradient, &rj.gradient, metric);
        cells[ri.class_id][rj.class_id].push(v);
        if mode != PairMode::TrainVal && ri.class_id != rj.class_id {
            cells[rj.class_id][ri.class_id].push(v);
        }
    }
    cells
}

pub fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn naive_matrix(snap: &GradientSnapshot, metric: StiffnessMetric, mode: PairMode) -> Vec<Vec<Option<f64>>> {
    naive_cells(snap, metric, mode)
        .iter()
        .map(|row| row.iter().map(|c| mean(c)).collect())
        .collect()
}

/// (within, between) or None when a cell is empty.
pub fn naive_within_between(m: &[Vec<Option<f64>>]) -> Option<(f64, f64)> {
    let nc = m.len();
    let (mut w, mut b) = (0.0, 0.0);
    for (a, row) in m.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            if a == c {
                w += (*v)?;
            } else {
                b += (*v)?;
            }
        }
    }
    Some((w / nc as f64, b / (nc * (nc - 1)) as f64))
}

/// Means of the four hierarchy buckets.
pub fn naive_hierarchy(snap: &GradientSnapshot, metric: StiffnessMetric, mode: PairMode) -> [Option<f64>; 4] {
    let mut buckets: [Vec<f64>; 4] = Default::default();
    for (i, j) in naive_pairs(snap, mode) {
        let (ri, rj) = (&snap.records[i], &snap.records[j]);
        let v = naive_pair(&ri.gradient, &rj.gradient, metric);
        if ri.class_id == rj.class_id {
            buckets[0].push(v);
            continue;
        }
        buckets[3].push(v);
        if ri.super_class_id == rj.super_class_id {
            buckets[1].push(v);
        } else if ri.super_super_class_id == rj.super_super_class_id {
            buckets[2].push(v);
        }
    }
    [mean(&buckets[0]), mean(&buckets[1]), mean(&buckets[2]), mean(&buckets[3])]
}

/// Same-class (distance, stiffness) samples, sorted.
pub fn naive_profile(snap: &GradientSnapshot, metric: StiffnessMetric, mode: PairMode) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = naive_pairs(snap, mode)
        .into_iter()
        .filter(|&(i, j)| snap.records[i].class_id == snap.records[j].class_id)
        .map(|(i, j)| {
            let (ri, rj) = (&snap.records[i], &snap.records[j]);
            let cos = naive_dot(&ri.features, &rj.features)
                / (naive_dot(&ri.features, &ri.features) * naive_dot(&rj.features, &rj.features)).sqrt();
            ((1.0 - cos).clamp(0.0, 2.0), naive_pair(&ri.gradient, &rj.gradient, metric))
        })
        .collect();
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    out
}

pub fn close(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= tol,
        (None, None) => true,
        _ => false,
    }
}

/// Compares every analyzer statistic against the double-loop oracles.
pub fn check_against_oracle(snap: &GradientSnapshot) -> Result<(), String> {
    let an = Analyzer::new(snap).unwrap();
    for metric in StiffnessMetric::ALL {
        for mode in PairMode::ALL {
            let m = an.class_matrix(metric, mode);
            let oracle = naive_matrix(snap, metric, mode);
            let cells = naive_cells(snap, metric, mode);
            for a in 0..m.num_classes {
                for b in 0..m.num_classes {
                    ensure!(close(m.values[a][b], oracle[a][b], 1e-12), "{metric:?} {mode:?} ({a},{b})");
                    ensure_eq!(m.pair_counts[a][b] as usize, cells[a][b].len());
                    let c = &cells[a][b];
                    if c.len() > 1 {
                        let mu = mean(c).unwrap();
                        let var = c.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (c.len() - 1) as f64;
                        let se = (var / c.len() as f64).sqrt();
                        ensure!((m.std_errs[a][b].unwrap() - se).abs() < 1e-12);
                    }
                }
            }
            match (within_between(&m).ok(), naive_within_between(&oracle)) {
                (Some(wb), Some((w, b))) => {
                    ensure!((wb.within - w).abs() < 1e-12);
                    ensure!((wb.between - b).abs() < 1e-12);
                }
                (None, None) => {}
                (got, want) => ensure!(false, "within_between {got:?} vs {want:?}"),
            }
            let h = an.hierarchy_summary(metric, mode).unwrap();
            let hb = naive_hierarchy(snap, metric, mode);
            let got = [h.same_class, h.same_super_diff_class, h.same_ssc_diff_super, h.diff_class_baseline];
            for k in 0..4 {
                ensure!(close(got[k].map(|s| s.mean), hb[k], 1e-12), "bucket {k}");
            }
            let want = naive_profile(snap, metric, mode);
            match an.distance_profile(metric, mode) {
                Ok(p) => {
                    let mut got: Vec<(f64, f64)> = p.samples.iter().map(|s| (s.distance, s.stiffness)).collect();
                    got.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    ensure_eq!(got.len(), want.len());
                    for (g, w) in got.iter().zip(&want) {
                        ensure!((g.0 - w.0).abs() < 1e-12 && (g.1 - w.1).abs() < 1e-12);
                    }
                }
                Err(_) => ensure!(want.is_empty()),
            }
        }
    }
    Ok(())
}
