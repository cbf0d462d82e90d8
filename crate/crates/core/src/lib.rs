//! Top-down breadth-first constituency tree decoding.
//!
//! The crate bundles the pieces needed to train and evaluate the decoder at
//! desk scale: a small reverse-mode differentiation engine, treebank I/O, a
//! PCFG oracle for synthetic data, the tree decoder and its sentence-conditioned
//! reranking variant, a sequential bracket-language-model baseline, the training
//! loop, and the evaluation metrics.

pub mod autodiff;
pub mod decoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod parser;
pub mod pcfg;
pub mod seq_lm;
pub mod training;
pub mod treebank;
pub mod vocab;

pub use error::{Error, Result};
