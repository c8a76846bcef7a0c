//! Desk-scale laboratory for LayerNorm placement in zero-shot multilingual
//! translation.
//!
//! The pipeline is: [`corpus`] generates synthetic English-centric parallel
//! data, [`model`] builds a small encoder-decoder Transformer under one of
//! several norm wirings, [`training`] fits it, [`eval`] decodes and scores
//! every direction, and [`probes`] inspects the hidden states. [`experiment`]
//! and [`report`] run the whole matrix and render tables and plots.

pub mod corpus;
mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod probes;
pub mod report;
pub mod training;

pub use error::{Error, Result};
