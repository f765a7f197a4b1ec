//! Targeted style adversary training at desk scale.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]), a
//! split convolutional encoder ([`backbone`]), feature-statistic style
//! operations ([`style`]), entropy-based recognizability tracking
//! ([`recognizability`]), angular-margin losses ([`margin`]), the λ-space
//! adversary ([`adversary`]), a procedural identity dataset ([`data`]), the
//! two-stage trainer ([`trainer`]) and an evaluation harness ([`eval`]).

pub mod adversary;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod margin;
pub mod recognizability;
pub mod runtime;
pub mod style;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod testutil;
