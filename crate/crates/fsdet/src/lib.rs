//! Head-level few-shot object detection toolkit.
//!
//! The detector backbone is treated as a frozen feature extractor whose
//! per-proposal outputs are an input artifact ([`featurestore`]). On top of
//! those features this crate trains the last-layer box predictor in two
//! stages ([`head`]): once on abundant base-class data, then on a balanced
//! K-shot subset of base and novel classes drawn by [`sampler`]. Predictions
//! are scored with a COCO-style evaluator that reports base/novel splits
//! ([`evaluator`]), and repeated runs are summarized with 95% confidence
//! intervals ([`stats`]). [`benchmark`] wires the whole protocol together.

pub mod benchmark;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod featurestore;
pub mod head;
pub mod sampler;
pub mod stats;

pub use dataset::{Annotation, BBox, CategoryTable, Dataset, Split};
pub use error::{Error, Result};
pub use featurestore::{FeatureRecord, FeatureSet, SynthConfig};
pub use head::{ClassifierHead, ClassifierKind, Heads, RegressorHead};
