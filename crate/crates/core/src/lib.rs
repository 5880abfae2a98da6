//! Joint jammer localization and RSS field reconstruction.
//!
//! A log-distance path-loss expert and a convolutional expert over building
//! heights are fused by log-linear pooling of their Gaussian likelihoods. The
//! MAP parameters are found with Adam, and a Gauss–Newton Laplace
//! approximation gives posterior uncertainty over the jammer position and the
//! predicted field.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod evaluation;
pub mod experts;
pub mod gradient;
pub mod grid;
pub mod inference;
pub mod io;
pub mod model;
pub mod oracle;
pub mod params;
pub mod pooling;
pub mod scene;

pub use error::{Error, Result};
