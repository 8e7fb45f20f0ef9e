//! Frozen-weight gradient snapshots and their binary file format.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! header  magic "STFSNAP\0"     8 bytes
//!         version               u32 (= 1)
//!         param_count           u64
//!         example_count         u64
//!         feature_dim           u64
//!         num_classes           u64
//!         epoch                 u64
//!         train_loss            f64
//!         val_loss              f64 (NaN when absent)
//!         learning_rate         f64
//!         weights_hash          8 bytes
//! record  split                 u8  (0 train, 1 validation)
//!         class_id              u32
//!         super_class_id        u32 (u32::MAX when absent)
//!         super_super_class_id  u32 (u32::MAX when absent)
//!         loss                  f64
//!         features              feature_dim × f64
//!         gradient              param_count × f64
//! ```

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::StiffnessError;
use crate::dataset::{Dataset, EvalSubset, LabeledExample};
use crate::model::MlpParams;

const MAGIC: &[u8; 8] = b"STFSNAP\0";
const VERSION: u32 = 1;
const NONE_ID: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub learning_rate: f64,
    /// 16 hex digits.
    pub weights_hash: String,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientRecord {
    pub gradient: Vec<f64>,
    pub loss: f64,
    pub class_id: usize,
    pub super_class_id: Option<usize>,
    pub super_super_class_id: Option<usize>,
    pub split: Split,
    pub features: Vec<f64>,
}

/// Per-example gradients evaluated at one frozen parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSnapshot {
    pub meta: SnapshotMeta,
    pub records: Vec<GradientRecord>,
}

impl GradientSnapshot {
    pub fn param_count(&self) -> usize {
        self.records.first().map_or(0, |r| r.gradient.len())
    }

    pub fn feature_dim(&self) -> usize {
        self.records.first().map_or(0, |r| r.features.len())
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Multiplies every gradient by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for r in &mut out.records {
            r.gradient.iter_mut().for_each(|g| *g *= factor);
        }
        out
    }
}

fn record_for(
    params: &MlpParams,
    ex: &LabeledExample,
    split: Split,
) -> Result<GradientRecord, StiffnessError> {
    let (loss, gradient) = params.example_loss_and_grad(ex)?;
    Ok(GradientRecord {
        gradient,
        loss,
        class_id: ex.class_id,
        super_class_id: ex.super_class_id,
        super_super_class_id: ex.super_super_class_id,
        split,
        features: ex.features.clone(),
    })
}

/// Evaluates one gradient per subset example: training subset first, then
/// validation, each in subset order.
pub fn collect_snapshot(
    params: &MlpParams,
    dataset: &Dataset,
    subset: &EvalSubset,
    mut meta: SnapshotMeta,
) -> Result<GradientSnapshot, StiffnessError> {
    let mut jobs: Vec<(&LabeledExample, Split)> =
        Vec::with_capacity(subset.train_indices.len() + subset.val_indices.len());
    for &i in &subset.train_indices {
        let ex = dataset
            .train
            .get(i)
            .ok_or(StiffnessError::SubsetIndex { split: "train", index: i })?;
        jobs.push((ex, Split::Train));
    }
    for &i in &subset.val_indices {
        let ex = dataset
            .validation
            .get(i)
            .ok_or(StiffnessError::SubsetIndex {
                split: "validation",
                index: i,
            })?;
        jobs.push((ex, Split::Val));
    }
    let records = jobs
        .par_iter()
        .map(|&(ex, split)| record_for(params, ex, split))
        .collect::<Result<Vec<_>, _>>()?;
    meta.weights_hash = params.weights_hash();
    meta.num_classes = dataset.num_classes;
    Ok(GradientSnapshot { meta, records })
}

fn id_to_u32(id: Option<usize>) -> u32 {
    id.map_or(NONE_ID, |v| v as u32)
}

pub fn encode_snapshot(snap: &GradientSnapshot) -> Vec<u8> {
    let p = snap.param_count();
    let d = snap.feature_dim();
    let mut out = Vec::with_capacity(96 + snap.records.len() * (21 + 8 * (p + d)));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [p, snap.records.len(), d, snap.meta.num_classes, snap.meta.epoch] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.extend_from_slice(&snap.meta.train_loss.to_le_bytes());
    out.extend_from_slice(&snap.meta.val_loss.unwrap_or(f64::NAN).to_le_bytes());
    out.extend_from_slice(&snap.meta.learning_rate.to_le_bytes());
    let mut hash = [0u8; 8];
    for (k, byte) in hash.iter_mut().enumerate() {
        *byte = snap
            .meta
            .weights_hash
            .get(2 * k..2 * k + 2)
            .and_then(|h| u8::from_str_radix(h, 16).ok())
            .unwrap_or(0);
    }
    out.extend_from_slice(&hash);
    for r in &snap.records {
        out.push(match r.split {
            Split::Train => 0,
            Split::Val => 1,
        });
        out.extend_from_slice(&(r.class_id as u32).to_le_bytes());
        out.extend_from_slice(&id_to_u32(r.super_class_id).to_le_bytes());
        out.extend_from_slice(&id_to_u32(r.super_super_class_id).to_le_bytes());
        out.extend_from_slice(&r.loss.to_le_bytes());
        for v in r.features.iter().chain(&r.gradient) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], (usize, String)> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err((
                self.pos,
                format!("truncated while reading {what} ({n} bytes needed)"),
            )),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8, (usize, String)> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, (usize, String)> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, (usize, String)> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64, (usize, String)> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>, (usize, String)> {
        let bytes = self.take(n.checked_mul(8).ok_or((self.pos, "size overflow".to_string()))?, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn opt_id(v: u32) -> Option<usize> {
    (v != NONE_ID).then_some(v as usize)
}

/// Decodes a snapshot; errors carry the byte offset where decoding failed.
pub fn decode_snapshot(bytes: &[u8]) -> Result<GradientSnapshot, (usize, String)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err((0, "bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err((8, format!("unsupported version {version}")));
    }
    let p = r.u64("param_count")? as usize;
    let n = r.u64("example_count")? as usize;
    let d = r.u64("feature_dim")? as usize;
    let num_classes = r.u64("num_classes")? as usize;
    let epoch = r.u64("epoch")? as usize;
    let train_loss = r.f64("train_loss")?;
    let val_loss = r.f64("val_loss")?;
    let learning_rate = r.f64("learning_rate")?;
    let weights_hash = r
        .take(8, "weights_hash")?
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    let mut records = Vec::with_capacity(n.min(1 << 20));
    for k in 0..n {
        let at = r.pos;
        let split = match r.u8("split")? {
            0 => Split::Train,
            1 => Split::Val,
            other => return Err((at, format!("record {k}: bad split tag {other}"))),
        };
        let class_id = r.u32("class_id")? as usize;
        if class_id >= num_classes {
            return Err((at + 1, format!("record {k}: class {class_id} >= {num_classes}")));
        }
        let super_class_id = opt_id(r.u32("super_class_id")?);
        let super_super_class_id = opt_id(r.u32("super_super_class_id")?);
        let loss = r.f64("loss")?;
        let features = r.f64s(d, "features")?;
        let gradient = r.f64s(p, "gradient")?;
        records.push(GradientRecord {
            gradient,
            loss,
            class_id,
            super_class_id,
            super_super_class_id,
            split,
            features,
        });
    }
    if r.pos != bytes.len() {
        return Err((r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(GradientSnapshot {
        meta: SnapshotMeta {
            epoch,
            train_loss,
            val_loss: (!val_loss.is_nan()).then_some(val_loss),
            learning_rate,
            weights_hash,
            num_classes,
        },
        records,
    })
}

pub fn write_snapshot(path: &Path, snap: &GradientSnapshot) -> Result<(), StiffnessError> {
    fs::write(path, encode_snapshot(snap)).map_err(|source| StiffnessError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_snapshot(path: &Path) -> Result<GradientSnapshot, StiffnessError> {
    let bytes = fs::read(path).map_err(|source| StiffnessError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_snapshot(&bytes).map_err(|(offset, detail)| StiffnessError::Format {
        path: path.display().to_string(),
        offset,
        detail,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_eval_subset, synth_hierarchy, SynthConfig};
    use crate::model::{MlpParams, MlpSpec};

    fn fixture() -> (MlpParams, Dataset, EvalSubset) {
        let ds = synth_hierarchy(&SynthConfig::new(2, 1, 2, 6, 6, (3.0, 1.0, 0.5), 4)).unwrap();
        let params = MlpParams::init(MlpSpec::new(vec![6, 5, 4]).unwrap(), 1).unwrap();
        let sub = make_eval_subset(&ds, 8, 6, 2).unwrap();
        (params, ds, sub)
    }

    fn meta() -> SnapshotMeta {
        SnapshotMeta {
            epoch: 3,
            train_loss: 0.75,
            val_loss: Some(0.8),
            learning_rate: 1e-3,
            weights_hash: String::new(),
            num_classes: 0,
        }
    }

    #[test]
    fn one_record_per_subset_example_matching_direct_calls() {
        let (params, ds, sub) = fixture();
        let snap = collect_snapshot(&params, &ds, &sub, meta()).unwrap();
        assert_eq!(snap.records.len(), 14);
        assert_eq!(snap.indices(Split::Train).len(), 8);
        assert_eq!(snap.meta.train_loss, 0.75);
        assert_eq!(snap.meta.weights_hash, params.weights_hash());
        let (loss, grad) = params
            .example_loss_and_grad(&ds.validation[sub.val_indices[2]])
            .unwrap();
        let rec = &snap.records[8 + 2];
        assert_eq!(rec.loss.to_bits(), loss.to_bits());
        assert_eq!(rec.gradient, grad);
        assert_eq!(rec.split, Split::Val);
    }

    #[test]
    fn binary_roundtrip_is_exact() {
        let (params, ds, sub) = fixture();
        let snap = collect_snapshot(&params, &ds, &sub, meta()).unwrap();
        let back = decode_snapshot(&encode_snapshot(&snap)).unwrap();
        assert_eq!(back, snap);
    }

    #[test]
    fn truncation_and_garbage_are_located() {
        let (params, ds, sub) = fixture();
        let snap = collect_snapshot(&params, &ds, &sub, meta()).unwrap();
        let bytes = encode_snapshot(&snap);
        let (offset, msg) = decode_snapshot(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(offset > 80 && msg.contains("gradient"), "{offset} {msg}");
        let mut extra = bytes.clone();
        extra.push(0);
        assert_eq!(decode_snapshot(&extra).unwrap_err().0, bytes.len());
        let mut bad = bytes;
        bad[0] = b'X';
        assert_eq!(decode_snapshot(&bad).unwrap_err().0, 0);
    }
}
