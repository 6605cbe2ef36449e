//! Desk-scale unsupervised domain adaptation for retrieval-augmented
//! translation: a small frozen transformer, encoder-side residual adapters
//! trained by representation matching, a token-level vector datastore with a
//! native IVF index, and kNN-interpolated decoding.

pub mod corpus;
pub mod datastore;
pub mod decode;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
