//! Masked step modeling for procedural task sequences.
//!
//! The pipeline: build a corpus of step sequences with weak step labels
//! ([`corpus`], [`weaklabel`]), pre-train a step transformer to predict the
//! labels of masked-out steps ([`model`], [`training`]), then synthesize and
//! evaluate six downstream benchmarks ([`benchmarks`], [`downstream`]).

pub mod benchmarks;
pub mod checkpoint;
pub mod corpus;
pub mod downstream;
pub mod error;
pub mod model;
pub mod seed;
pub mod training;
pub mod weaklabel;

pub use error::{Error, Result};
