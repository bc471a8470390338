//! Unsupervised orthogonal alignment of diagonal-Gaussian embeddings.
//!
//! The pipeline: load two embedding sets ([`dataio`]), learn an orthogonal
//! map between them without any seed dictionary ([`aligner`]), then score
//! translation retrieval against a reference lexicon ([`evalkit`]).
//! [`synthgen`] produces pairs with a known answer for testing.

pub mod aligner;
pub mod dataio;
pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod synthgen;
pub mod transport;

pub use error::{Error, Result};
