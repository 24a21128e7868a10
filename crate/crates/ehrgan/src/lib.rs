//! Data augmentation for risk prediction over medical-event sequences.
//!
//! The pipeline: generate a synthetic patient cohort, learn code embeddings
//! with skip-gram, embed each record as a `T x M` matrix, train one
//! transition GAN per class whose generator encodes a real record and decodes
//! a perturbed neighbour of it, then train a convolutional risk predictor
//! whose loss mixes real labeled records with generated transitions.
//!
//! Everything is deterministic given a root seed: every stage draws from a
//! named ChaCha substream, so any artifact can be reproduced bit-for-bit.
//!
//! See `examples/` for one runnable program per stage, or the `ehrgan`
//! binary for the same stages behind a flat-file config.

pub mod config;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod gan;
pub mod pipeline;
pub mod predictor;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
