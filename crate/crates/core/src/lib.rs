//! Syntax-guided attention for sequence-to-sequence models.
//!
//! A lightweight parser head induces syntactic distances and heights from
//! the encoder input. These turn into a soft dependency matrix that gates
//! self-attention in selected encoder layers. Training mixes a masked
//! language model loss with the translation loss.
#![no_std]

extern crate alloc;

pub mod attention;
pub mod bleu;
pub mod decode;
pub mod error;
pub mod estimator;
pub mod graph;
pub mod inducer;
pub mod matrix;
pub mod model;
pub mod optim;
pub mod params;
pub mod sequence;
pub mod trainer;
pub mod tree;

pub use error::{Error, Result};
pub use matrix::Matrix;
