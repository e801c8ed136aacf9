//! Speech/text multimodal training with bidirectional attention on
//! synthetic paired data.
//!
//! The crate is organized bottom-up: [`numerics`] (matrices, softmax,
//! seeded randomness, the finite-difference oracle), [`ctc`], [`biam`],
//! [`encoders`], [`losses`], [`model`] (the assembled network), [`data`]
//! (synthetic corpora and JSONL), [`train`] (staged training and
//! evaluation), [`gradcheck`] and [`export`].

pub mod biam;
pub mod ctc;
pub mod data;
pub mod encoders;
pub mod error;
pub mod export;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod params;
pub mod train;

pub use error::{Error, Result};
pub use numerics::{Matrix, SeededRng};
