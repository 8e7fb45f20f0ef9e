//! Data ingestion, synthetic hierarchical data and preprocessing.
//!
//! Every example that reaches the model has been standardized per feature
//! (with training-split statistics) and then projected onto the unit sphere.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Standard deviations below this are treated as a constant feature.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("IDX format error in {field}: {detail}")]
    Format { field: &'static str, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("requested {requested} examples from the {split} split, which has {available}")]
    SubsetTooLarge {
        split: &'static str,
        requested: usize,
        available: usize,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// An example before standardization and sphere projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawExample {
    pub features: Vec<f64>,
    pub class_id: usize,
    pub super_class_id: Option<usize>,
    pub super_super_class_id: Option<usize>,
}

impl RawExample {
    pub fn new(features: Vec<f64>, class_id: usize) -> Self {
        Self {
            features,
            class_id,
            super_class_id: None,
            super_super_class_id: None,
        }
    }
}

/// A preprocessed example: unit-norm features plus its labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub features: Vec<f64>,
    pub class_id: usize,
    pub super_class_id: Option<usize>,
    pub super_super_class_id: Option<usize>,
}

/// Class → (super-class, super-super-class) assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hierarchy {
    pub parents: Vec<(usize, usize)>,
}

impl Hierarchy {
    pub fn super_of(&self, class_id: usize) -> usize {
        self.parents[class_id].0
    }

    pub fn super_super_of(&self, class_id: usize) -> usize {
        self.parents[class_id].1
    }

    pub fn num_super_classes(&self) -> usize {
        self.parents.iter().map(|p| p.0 + 1).max().unwrap_or(0)
    }

    pub fn num_super_super_classes(&self) -> usize {
        self.parents.iter().map(|p| p.1 + 1).max().unwrap_or(0)
    }

    fn validate(&self, num_classes: usize) -> Result<(), DatasetError> {
        if self.parents.len() != num_classes {
            return Err(DatasetError::Invalid(format!(
                "hierarchy covers {} classes, dataset has {num_classes}",
                self.parents.len()
            )));
        }
        // each super-class must map to exactly one super-super-class
        let mut owner: Vec<Option<usize>> = vec![None; self.num_super_classes()];
        for (class, &(sc, ssc)) in self.parents.iter().enumerate() {
            match owner[sc] {
                Some(prev) if prev != ssc => {
                    return Err(DatasetError::Invalid(format!(
                        "super-class {sc} assigned to super-super-classes {prev} and {ssc} (class {class})"
                    )))
                }
                _ => owner[sc] = Some(ssc),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Vec<LabeledExample>,
    pub validation: Vec<LabeledExample>,
    pub num_classes: usize,
    pub hierarchy: Option<Hierarchy>,
}

impl Dataset {
    pub fn new(
        train: Vec<LabeledExample>,
        validation: Vec<LabeledExample>,
        num_classes: usize,
        hierarchy: Option<Hierarchy>,
    ) -> Result<Self, DatasetError> {
        let ds = Self {
            train,
            validation,
            num_classes,
            hierarchy,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.num_classes == 0 {
            return Err(DatasetError::Invalid("zero classes".into()));
        }
        let dim = self.input_dim();
        let mut seen = vec![false; self.num_classes];
        for (split, examples) in [("train", &self.train), ("validation", &self.validation)] {
            for (i, ex) in examples.iter().enumerate() {
                if ex.class_id >= self.num_classes {
                    return Err(DatasetError::Invalid(format!(
                        "{split}[{i}] has class {} >= {}",
                        ex.class_id, self.num_classes
                    )));
                }
                if ex.features.len() != dim {
                    return Err(DatasetError::Invalid(format!(
                        "{split}[{i}] has {} features, expected {dim}",
                        ex.features.len()
                    )));
                }
                if let Some(h) = &self.hierarchy {
                    let (sc, ssc) = h.parents.get(ex.class_id).copied().unwrap_or((0, 0));
                    if ex.super_class_id != Some(sc) || ex.super_super_class_id != Some(ssc) {
                        return Err(DatasetError::Invalid(format!(
                            "{split}[{i}] hierarchy ids disagree with the hierarchy map"
                        )));
                    }
                }
                if split == "train" {
                    seen[ex.class_id] = true;
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(DatasetError::Invalid(format!(
                "class {missing} has no training examples"
            )));
        }
        if let Some(h) = &self.hierarchy {
            h.validate(self.num_classes)?;
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.train.first().map_or(0, |e| e.features.len())
    }

    /// Builds a dataset from raw splits, standardizing with training statistics.
    pub fn from_raw(
        train: &[RawExample],
        validation: &[RawExample],
        num_classes: usize,
        hierarchy: Option<Hierarchy>,
    ) -> Result<Self, DatasetError> {
        let (train, validation, _) = preprocess(train, validation)?;
        Self::new(train, validation, num_classes, hierarchy)
    }

    pub fn save_json(&self, path: &Path, synth: Option<&SynthConfig>) -> Result<(), DatasetError> {
        let file = DatasetFile {
            format: DATASET_FORMAT.to_string(),
            version: DATASET_VERSION,
            synth: synth.cloned(),
            dataset: self.clone(),
        };
        let text = serde_json::to_string(&file)?;
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn load_json(path: &Path) -> Result<(Self, Option<SynthConfig>), DatasetError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let file: DatasetFile = serde_json::from_str(&text)?;
        if file.format != DATASET_FORMAT || file.version != DATASET_VERSION {
            return Err(DatasetError::Invalid(format!(
                "unsupported dataset file {} v{}",
                file.format, file.version
            )));
        }
        file.dataset.validate()?;
        Ok((file.dataset, file.synth))
    }
}

const DATASET_FORMAT: &str = "stiffkit-dataset";
const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    format: String,
    version: u32,
    synth: Option<SynthConfig>,
    dataset: Dataset,
}

// ---------------------------------------------------------------------------
// IDX

/// Decoded IDX image file; pixels scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub images: Vec<Vec<f64>>,
}

fn read_u32(cur: &mut Cursor<&[u8]>, field: &'static str) -> Result<u32, DatasetError> {
    cur.read_u32::<BigEndian>().map_err(|_| DatasetError::Format {
        field,
        detail: "truncated header".into(),
    })
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages, DatasetError> {
    let mut cur = Cursor::new(bytes);
    let magic = read_u32(&mut cur, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DatasetError::Format {
            field: "magic",
            detail: format!("expected {IDX_IMAGES_MAGIC:#010x} for images, found {magic:#010x}"),
        });
    }
    let count = read_u32(&mut cur, "image count")? as usize;
    let rows = read_u32(&mut cur, "rows")? as usize;
    let cols = read_u32(&mut cur, "cols")? as usize;
    let pixels = rows * cols;
    let body = &bytes[16..];
    if body.len() != count * pixels {
        return Err(DatasetError::Format {
            field: "pixel data",
            detail: format!(
                "expected {} bytes for {count} images of {rows}x{cols}, found {}",
                count * pixels,
                body.len()
            ),
        });
    }
    let images = if pixels == 0 {
        vec![Vec::new(); count]
    } else {
        body.chunks_exact(pixels)
            .map(|img| img.iter().map(|&b| f64::from(b) / 255.0).collect())
            .collect()
    };
    Ok(IdxImages { rows, cols, images })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, DatasetError> {
    let mut cur = Cursor::new(bytes);
    let magic = read_u32(&mut cur, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DatasetError::Format {
            field: "magic",
            detail: format!("expected {IDX_LABELS_MAGIC:#010x} for labels, found {magic:#010x}"),
        });
    }
    let count = read_u32(&mut cur, "label count")? as usize;
    let mut labels = Vec::with_capacity(count);
    cur.read_to_end(&mut labels).map_err(|e| DatasetError::Format {
        field: "label data",
        detail: e.to_string(),
    })?;
    if labels.len() != count {
        return Err(DatasetError::Format {
            field: "label data",
            detail: format!("expected {count} labels, found {}", labels.len()),
        });
    }
    Ok(labels)
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.images.len() * images.rows * images.cols);
    out.write_u32::<BigEndian>(IDX_IMAGES_MAGIC).unwrap();
    out.write_u32::<BigEndian>(images.images.len() as u32).unwrap();
    out.write_u32::<BigEndian>(images.rows as u32).unwrap();
    out.write_u32::<BigEndian>(images.cols as u32).unwrap();
    for img in &images.images {
        out.extend(img.iter().map(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.write_u32::<BigEndian>(IDX_LABELS_MAGIC).unwrap();
    out.write_u32::<BigEndian>(labels.len() as u32).unwrap();
    out.extend_from_slice(labels);
    out
}

/// Reads an IDX image/label file pair into raw examples.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Vec<RawExample>, DatasetError> {
    let img_bytes = fs::read(images_path).map_err(io_err(images_path))?;
    let lbl_bytes = fs::read(labels_path).map_err(io_err(labels_path))?;
    let images = parse_idx_images(&img_bytes)?;
    let labels = parse_idx_labels(&lbl_bytes)?;
    if images.images.len() != labels.len() {
        return Err(DatasetError::Format {
            field: "count",
            detail: format!(
                "{} images but {} labels",
                images.images.len(),
                labels.len()
            ),
        });
    }
    Ok(images
        .images
        .into_iter()
        .zip(labels)
        .map(|(px, l)| RawExample::new(px, usize::from(l)))
        .collect())
}

// ---------------------------------------------------------------------------
// Preprocessing

/// Per-feature standardization fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(train: &[RawExample]) -> Result<Self, DatasetError> {
        if train.len() < 2 {
            return Err(DatasetError::Invalid(format!(
                "need at least 2 training examples to standardize, got {}",
                train.len()
            )));
        }
        let dim = train[0].features.len();
        if dim == 0 {
            return Err(DatasetError::Invalid("examples have no features".into()));
        }
        let n = train.len() as f64;
        let mut mean = vec![0.0; dim];
        for ex in train {
            if ex.features.len() != dim {
                return Err(DatasetError::Invalid("ragged feature vectors".into()));
            }
            for (m, x) in mean.iter_mut().zip(&ex.features) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for ex in train {
            for ((v, x), m) in var.iter_mut().zip(&ex.features).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var.into_iter().map(|v| (v / n).sqrt()).collect();
        Ok(Self { mean, std })
    }

    /// Standardizes then scales to unit norm.
    pub fn apply(&self, raw: &RawExample) -> Result<LabeledExample, DatasetError> {
        if raw.features.len() != self.mean.len() {
            return Err(DatasetError::Invalid(format!(
                "example has {} features, standardizer expects {}",
                raw.features.len(),
                self.mean.len()
            )));
        }
        let mut features: Vec<f64> = raw
            .features
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| if *s < STD_FLOOR { 0.0 } else { (x - m) / s })
            .collect();
        let norm = crate::linalg::norm(&features);
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(DatasetError::Invalid(
                "example has zero norm after standardization".into(),
            ));
        }
        features.iter_mut().for_each(|x| *x /= norm);
        Ok(LabeledExample {
            features,
            class_id: raw.class_id,
            super_class_id: raw.super_class_id,
            super_super_class_id: raw.super_super_class_id,
        })
    }
}

/// Standardizes both splits with training statistics, then projects to the
/// unit sphere.
pub fn preprocess(
    train: &[RawExample],
    validation: &[RawExample],
) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>, Standardizer), DatasetError> {
    let st = Standardizer::fit(train)?;
    let tr = train.iter().map(|r| st.apply(r)).collect::<Result<_, _>>()?;
    let va = validation
        .iter()
        .map(|r| st.apply(r))
        .collect::<Result<_, _>>()?;
    Ok((tr, va, st))
}

// ---------------------------------------------------------------------------
// Synthetic hierarchy

/// Parameters of the nested Gaussian-blob generator.
///
/// `spreads` are per-coordinate standard deviations of, in order, the
/// super-super-class centers around the origin, the super-class centers
/// around their super-super-class center and the class centers around their
/// super-class center. Examples scatter around their class center with
/// per-coordinate standard deviation `example_noise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_super_super: usize,
    pub supers_per_super_super: usize,
    pub classes_per_super: usize,
    pub dim: usize,
    pub n_train_per_class: usize,
    pub n_val_per_class: usize,
    pub spreads: [f64; 3],
    pub example_noise: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// Validation split gets the same per-class count as training; example
    /// noise equals the class-center spread.
    pub fn new(
        num_ssc: usize,
        sc_per_ssc: usize,
        classes_per_sc: usize,
        dim: usize,
        n_per_class: usize,
        spreads: (f64, f64, f64),
        seed: u64,
    ) -> Self {
        Self {
            num_super_super: num_ssc,
            supers_per_super_super: sc_per_ssc,
            classes_per_super: classes_per_sc,
            dim,
            n_train_per_class: n_per_class,
            n_val_per_class: n_per_class,
            spreads: [spreads.0, spreads.1, spreads.2],
            example_noise: spreads.2,
            seed,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_super_super * self.supers_per_super_super * self.classes_per_super
    }

    pub fn hierarchy(&self) -> Hierarchy {
        let parents = (0..self.num_classes())
            .map(|c| {
                let sc = c / self.classes_per_super;
                (sc, sc / self.supers_per_super_super)
            })
            .collect();
        Hierarchy { parents }
    }

    fn validate(&self) -> Result<(), DatasetError> {
        let counts = [
            ("num_super_super", self.num_super_super),
            ("supers_per_super_super", self.supers_per_super_super),
            ("classes_per_super", self.classes_per_super),
            ("n_train_per_class", self.n_train_per_class),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(DatasetError::Config(format!("{name} must be >= 1")));
            }
        }
        if self.dim < 2 {
            return Err(DatasetError::Config("dim must be >= 2".into()));
        }
        let [a, b, c] = self.spreads;
        if !(a > 0.0 && b > 0.0 && c > 0.0) || !(a >= b && b >= c) {
            return Err(DatasetError::Config(format!(
                "spreads must be positive and non-increasing, got {:?}",
                self.spreads
            )));
        }
        if !(self.example_noise > 0.0) {
            return Err(DatasetError::Config("example_noise must be positive".into()));
        }
        Ok(())
    }
}

/// Raw (unpreprocessed) examples of a synthetic hierarchy, train then validation.
pub fn synth_raw(cfg: &SynthConfig) -> Result<(Vec<RawExample>, Vec<RawExample>), DatasetError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dim = cfg.dim;
    let gauss = |center: &[f64], sd: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        center
            .iter()
            .map(|c| {
                let z: f64 = StandardNormal.sample(rng);
                c + sd * z
            })
            .collect::<Vec<f64>>()
    };
    let origin = vec![0.0; dim];
    let hierarchy = cfg.hierarchy();
    let ssc_centers: Vec<Vec<f64>> = (0..cfg.num_super_super)
        .map(|_| gauss(&origin, cfg.spreads[0], &mut rng))
        .collect();
    let n_super = cfg.num_super_super * cfg.supers_per_super_super;
    let sc_centers: Vec<Vec<f64>> = (0..n_super)
        .map(|sc| gauss(&ssc_centers[sc / cfg.supers_per_super_super], cfg.spreads[1], &mut rng))
        .collect();
    let class_centers: Vec<Vec<f64>> = (0..cfg.num_classes())
        .map(|c| gauss(&sc_centers[hierarchy.super_of(c)], cfg.spreads[2], &mut rng))
        .collect();

    let draw = |count: usize, rng: &mut ChaCha8Rng| {
        let mut out = Vec::with_capacity(count * class_centers.len());
        for (c, center) in class_centers.iter().enumerate() {
            for _ in 0..count {
                out.push(RawExample {
                    features: gauss(center, cfg.example_noise, rng),
                    class_id: c,
                    super_class_id: Some(hierarchy.super_of(c)),
                    super_super_class_id: Some(hierarchy.super_super_of(c)),
                });
            }
        }
        out
    };
    let train = draw(cfg.n_train_per_class, &mut rng);
    let val = draw(cfg.n_val_per_class, &mut rng);
    Ok((train, val))
}

/// Generates and preprocesses a synthetic hierarchical dataset.
pub fn synth_hierarchy(cfg: &SynthConfig) -> Result<Dataset, DatasetError> {
    let (train, val) = synth_raw(cfg)?;
    Dataset::from_raw(&train, &val, cfg.num_classes(), Some(cfg.hierarchy()))
}

// ---------------------------------------------------------------------------
// Evaluation subsets

/// Fixed evaluation indices into the train and validation splits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSubset {
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub seed: u64,
}

/// Class-stratified sample of `n` indices, returned sorted.
///
/// Classes are visited round-robin in id order, each drawing from its own
/// seeded shuffle, so per-class counts differ by at most one unless a class
/// runs out.
fn stratified(examples: &[LabeledExample], num_classes: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, ex) in examples.iter().enumerate() {
        by_class[ex.class_id].push(i);
    }
    for pool in &mut by_class {
        pool.shuffle(&mut rng);
    }
    let mut cursors = vec![0usize; num_classes];
    let mut picked = Vec::with_capacity(n);
    while picked.len() < n {
        for (c, pool) in by_class.iter().enumerate() {
            if picked.len() == n {
                break;
            }
            if cursors[c] < pool.len() {
                picked.push(pool[cursors[c]]);
                cursors[c] += 1;
            }
        }
    }
    picked.sort_unstable();
    picked
}

pub fn make_eval_subset(
    dataset: &Dataset,
    n_train: usize,
    n_val: usize,
    seed: u64,
) -> Result<EvalSubset, DatasetError> {
    if n_train > dataset.train.len() {
        return Err(DatasetError::SubsetTooLarge {
            split: "train",
            requested: n_train,
            available: dataset.train.len(),
        });
    }
    if n_val > dataset.validation.len() {
        return Err(DatasetError::SubsetTooLarge {
            split: "validation",
            requested: n_val,
            available: dataset.validation.len(),
        });
    }
    Ok(EvalSubset {
        train_indices: stratified(&dataset.train, dataset.num_classes, n_train, seed),
        val_indices: stratified(
            &dataset.validation,
            dataset.num_classes,
            n_val,
            seed ^ 0x9e37_79b9_7f4a_7c15,
        ),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_synth() -> SynthConfig {
        SynthConfig::new(2, 2, 2, 16, 50, (4.0, 1.5, 0.5), 7)
    }

    #[test]
    fn synth_counts() {
        let ds = synth_hierarchy(&small_synth()).unwrap();
        assert_eq!(ds.num_classes, 8);
        assert_eq!(ds.train.len(), 400);
        let h = ds.hierarchy.as_ref().unwrap();
        assert_eq!(h.num_super_classes(), 4);
        assert_eq!(h.num_super_super_classes(), 2);
    }

    #[test]
    fn synth_is_deterministic() {
        assert_eq!(
            synth_hierarchy(&small_synth()).unwrap(),
            synth_hierarchy(&small_synth()).unwrap()
        );
    }

    #[test]
    fn synth_within_class_closer_than_across_super_super() {
        let ds = synth_hierarchy(&small_synth()).unwrap();
        let dist = |a: &[f64], b: &[f64]| {
            a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        };
        let (mut within, mut nw, mut across, mut na) = (0.0, 0, 0.0, 0);
        for (i, a) in ds.train.iter().enumerate() {
            for b in &ds.train[i + 1..] {
                let d = dist(&a.features, &b.features);
                if a.class_id == b.class_id {
                    within += d;
                    nw += 1;
                } else if a.super_super_class_id != b.super_super_class_id {
                    across += d;
                    na += 1;
                }
            }
        }
        assert!(within / (nw as f64) < across / (na as f64));
    }

    #[test]
    fn synth_rejects_bad_config() {
        let mut cfg = small_synth();
        cfg.num_super_super = 0;
        assert!(matches!(synth_hierarchy(&cfg), Err(DatasetError::Config(_))));
        let mut cfg = small_synth();
        cfg.spreads = [0.5, 1.5, 4.0];
        assert!(matches!(synth_hierarchy(&cfg), Err(DatasetError::Config(_))));
        let mut cfg = small_synth();
        cfg.dim = 1;
        assert!(matches!(synth_hierarchy(&cfg), Err(DatasetError::Config(_))));
    }

    fn raw(rows: &[[f64; 3]]) -> Vec<RawExample> {
        rows.iter()
            .enumerate()
            .map(|(i, r)| RawExample::new(r.to_vec(), i % 2))
            .collect()
    }

    #[test]
    fn preprocess_unit_norm_and_constant_column() {
        let train = raw(&[[1.0, 5.0, 0.2], [2.0, 5.0, 0.9], [4.0, 5.0, -0.3]]);
        let (tr, _, st) = preprocess(&train, &[]).unwrap();
        for ex in &tr {
            assert!((crate::linalg::norm(&ex.features) - 1.0).abs() <= 1e-9);
            assert_eq!(ex.features[1], 0.0);
        }
        assert!(st.std[1] < STD_FLOOR);
    }

    #[test]
    fn preprocess_standardized_means_are_zero() {
        let ds_raw = synth_raw(&small_synth()).unwrap();
        let st = Standardizer::fit(&ds_raw.0).unwrap();
        let dim = st.mean.len();
        let mut means = vec![0.0; dim];
        for ex in &ds_raw.0 {
            for j in 0..dim {
                means[j] += (ex.features[j] - st.mean[j]) / st.std[j];
            }
        }
        for m in means {
            assert!((m / ds_raw.0.len() as f64).abs() <= 1e-9);
        }
    }

    #[test]
    fn preprocess_needs_two_examples() {
        assert!(preprocess(&[], &[]).is_err());
        assert!(preprocess(&raw(&[[1.0, 2.0, 3.0]]), &[]).is_err());
    }

    #[test]
    fn renormalizing_is_idempotent() {
        let ds = synth_hierarchy(&small_synth()).unwrap();
        for ex in ds.train.iter().chain(&ds.validation) {
            let n = crate::linalg::norm(&ex.features);
            for x in &ex.features {
                assert!((x / n - x).abs() < 1e-12);
            }
        }
    }

    fn balanced(n_classes: usize, per_class: usize) -> Dataset {
        let cfg = SynthConfig {
            num_super_super: 1,
            supers_per_super_super: 1,
            classes_per_super: n_classes,
            dim: 4,
            n_train_per_class: per_class,
            n_val_per_class: per_class,
            spreads: [1.0, 1.0, 1.0],
            example_noise: 1.0,
            seed: 1,
        };
        synth_hierarchy(&cfg).unwrap()
    }

    #[test]
    fn eval_subset_is_stratified() {
        let ds = balanced(10, 80);
        let sub = make_eval_subset(&ds, 500, 100, 3).unwrap();
        let mut counts = [0usize; 10];
        for &i in &sub.train_indices {
            counts[ds.train[i].class_id] += 1;
        }
        assert_eq!(counts, [50; 10]);
        assert_eq!(sub.val_indices.len(), 100);
        assert_eq!(sub, make_eval_subset(&ds, 500, 100, 3).unwrap());
    }

    #[test]
    fn eval_subset_full_split_is_sorted_identity() {
        let ds = balanced(3, 5);
        let sub = make_eval_subset(&ds, 15, 15, 9).unwrap();
        assert_eq!(sub.train_indices, (0..15).collect::<Vec<_>>());
        assert!(matches!(
            make_eval_subset(&ds, 16, 1, 9),
            Err(DatasetError::SubsetTooLarge { split: "train", .. })
        ));
    }

    #[test]
    fn eval_subset_covers_all_classes_with_uneven_sizes() {
        let ds = balanced(4, 10);
        let sub = make_eval_subset(&ds, 7, 4, 2).unwrap();
        let mut classes: Vec<usize> = sub.val_indices.iter().map(|&i| ds.validation[i].class_id).collect();
        classes.sort();
        assert_eq!(classes, vec![0, 1, 2, 3]);
        let mut uniq = sub.train_indices.clone();
        uniq.dedup();
        assert_eq!(uniq.len(), 7);
    }

    #[test]
    fn idx_wrong_magic_and_count_mismatch() {
        let labels = encode_idx_labels(&[1, 2, 3]);
        let mut bad = labels.clone();
        bad[3] = 0x03;
        assert!(matches!(
            parse_idx_labels(&bad),
            Err(DatasetError::Format { field: "magic", .. })
        ));
        let imgs = IdxImages {
            rows: 2,
            cols: 2,
            images: vec![vec![0.0; 4]; 10],
        };
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lbl");
        fs::write(&ip, encode_idx_images(&imgs)).unwrap();
        fs::write(&lp, encode_idx_labels(&[0; 9])).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp),
            Err(DatasetError::Format { field: "count", .. })
        ));
    }

    #[test]
    fn idx_truncated_body() {
        let imgs = IdxImages {
            rows: 2,
            cols: 2,
            images: vec![vec![0.5; 4]; 3],
        };
        let bytes = encode_idx_images(&imgs);
        assert!(matches!(
            parse_idx_images(&bytes[..bytes.len() - 1]),
            Err(DatasetError::Format { field: "pixel data", .. })
        ));
        assert!(parse_idx_images(&bytes[..10]).is_err());
    }

    #[test]
    fn dataset_json_roundtrip() {
        let cfg = small_synth();
        let ds = synth_hierarchy(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ds.json");
        ds.save_json(&p, Some(&cfg)).unwrap();
        let (back, synth) = Dataset::load_json(&p).unwrap();
        assert_eq!(back, ds);
        assert_eq!(synth, Some(cfg));
    }

    #[test]
    fn dataset_rejects_missing_class() {
        let ex = LabeledExample {
            features: vec![1.0, 0.0],
            class_id: 0,
            super_class_id: None,
            super_super_class_id: None,
        };
        assert!(Dataset::new(vec![ex.clone(), ex], vec![], 2, None).is_err());
    }
}
