//! Multimodal antivaccine-post classifier: hashtag, text, and image branches
//! with semantic+task attention, scSE visual attention, projection/fusion,
//! and a four-score SVM ensemble, all built on a from-scratch reverse-mode
//! autodiff core.

pub mod branches;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod embeddings;
pub mod ensemble;
pub mod error;
pub mod model;
pub mod seta;
pub mod svm;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Mode, Scalar, Tape, Tensor, Var};
