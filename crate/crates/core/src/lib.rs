//! Binary tree encoding for visual place recognition under a storage budget.
//!
//! An ordered database of `N` place descriptors is encoded as `b = ceil(log2 N)`
//! linear classifiers, one per bit of the place index, so the model grows with
//! `log N` rather than `N`. Queries are localized by evaluating every level
//! classifier and reading the predicted bits back as an index.
//!
//! The crate is organised bottom-up:
//!
//! - [`dataset`]: descriptor matrices, file formats, synthetic traversals
//! - [`bitcodec`]: index <-> bit code conversion and heap-style tree addressing
//! - [`svm`]: linear max-margin classifiers (binary and one-vs-rest)
//! - [`featsel`]: per-classifier column selection by soft-thresholded cluster scores
//! - [`tree`]: full and compressed training, inference, storage sizing, budget fitting
//! - [`regions`]: contiguous map segmentation and region routing
//! - [`seqfilter`]: median-window temporal correction of predictions
//! - [`model`]: the canonical `BTEL-MDL` model file
//! - [`eval`]: baselines, recall curves, storage reports, experiments

pub mod bitcodec;
pub mod dataset;
mod error;
pub mod eval;
pub mod featsel;
pub mod io;
pub mod model;
pub mod regions;
pub mod seqfilter;
pub mod svm;
pub mod tree;

pub use error::{Error, Result};
