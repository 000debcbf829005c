//! Retrieval-based diagnosis engine.
//!
//! Images are represented by precomputed deep-feature vectors. A query image
//! is diagnosed from the labels of its `k` most cosine-similar images in a
//! training pool, and that retrieval-based diagnosis is compared against the
//! classifier's own softmax output with ROC/AUC, operating points, multiclass
//! accuracy, macro mAP, DeLong tests, stratified bootstrap intervals, paired
//! location tests and Holm correction.
//!
//! Module map:
//!
//! * [`dataset`] loads and validates manifests, softmax tables and pools.
//! * [`index`] is the exact top-k cosine search.
//! * [`classify`] turns neighbors and softmax rows into class scores.
//! * [`metrics`] and [`stats`] are the evaluation battery.
//! * [`experiment`] runs the intra/cross-source grids and writes reports.
//! * [`synth`] generates synthetic embeddings and hosts brute-force oracles.

pub mod classify;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod index;
pub mod metrics;
pub mod stats;
pub mod synth;

pub use classify::{ClassDistribution, LabelLookup, MalignantSet, Provenance};
pub use dataset::{Dataset, EmbeddingRecord, RetrievalPool, SoftmaxTable, Split};
pub use error::{Error, Result};
pub use index::{Neighbor, NormalizedIndex, RetrievalResult};
pub use metrics::{OperatingPoint, RocAnalysis};
pub use stats::{AucComparison, ConfidenceInterval, PairedTest, PairedTestResult};
