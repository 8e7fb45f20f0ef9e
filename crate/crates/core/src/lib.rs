//! Training and measurement toolkit for gradient alignment ("stiffness") in
//! small fully-connected classifiers.
//!
//! - [`linalg`]: deterministic vector primitives and least-squares line fits
//! - [`dataset`]: IDX ingestion, synthetic hierarchical data, preprocessing
//! - [`model`]: ReLU MLP with per-example backprop and Adam
//! - [`stiffness`]: gradient snapshots and pair statistics
//! - [`experiment`]: training runs, learning-rate sweeps and reports

pub mod dataset;
pub mod experiment;
pub mod linalg;
pub mod model;
pub mod stiffness;
