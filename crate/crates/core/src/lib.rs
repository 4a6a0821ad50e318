//! Page-level classification of scanned theses and dissertations.
//!
//! A page is an 8-bit grayscale scan plus its OCR text. Pages are classified
//! into thirteen structural categories by a two-stream model: a pre-activation
//! residual image encoder and a talking-heads text encoder, joined by
//! projections, a text-to-image cross-attention and a softmax head. Two such
//! models form a hierarchical classifier (chapter / non-chapter, then one of
//! twelve non-chapter categories). Minority categories are topped up with
//! rendered pseudo pages passed through scan-noise transforms.
//!
//! - [`corpus`]: records, OCR JSON, taxonomy, vocabulary, splits, synthetic data
//! - [`augment`]: paraphrase hook, wrapping, rendering, noise, balance plans
//! - [`neural`]: autograd tape, attention / feed-forward / residual kernels, focal loss, Adam
//! - [`model`]: the two-stream classifier, hierarchy, checkpoints
//! - [`train`]: batching, early stopping, hierarchical training
//! - [`evalrep`]: metrics, case evaluation, ablations, data-efficiency sweeps, reports
//!
//! Numeric code is generic over [`Scalar`]; the `*32` / `*64` aliases below fix it.

pub mod augment;
pub mod corpus;
pub mod error;
pub mod evalrep;
pub mod model;
pub mod neural;
pub mod rng;
pub mod scalar;
pub mod train;

pub use error::{Error, ErrorKind, Result};
pub use scalar::Scalar;

pub type Graph32 = neural::Graph<f32>;
pub type Graph64 = neural::Graph<f64>;
pub type ModelBundle32 = model::ModelBundle<f32>;
pub type ModelBundle64 = model::ModelBundle<f64>;
pub type HierarchicalClassifier32 = model::HierarchicalClassifier<f32>;
pub type HierarchicalClassifier64 = model::HierarchicalClassifier<f64>;
pub type OptimizerState32 = neural::OptimizerState<f32>;
pub type OptimizerState64 = neural::OptimizerState<f64>;
