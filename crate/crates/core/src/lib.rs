//! Keystroke-dynamics metric learning.
//!
//! The pipeline runs raw keystroke logs through [`corpus`] ingestion,
//! [`features`] extraction, [`sampler`] triplet generation, the Siamese LSTM
//! [`encoder`], and gallery/query [`eval`]uation. [`lab`] drives breadth-wise
//! and depth-wise sweeps over all of it.

pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod features;
pub mod lab;
pub mod sampler;

pub use error::{Error, Result};
