//! Style-conditioned outfit compatibility: data model, synthetic generator,
//! style extraction network, style-conditioned compatibility network,
//! training, outfit generation and evaluation.

#![allow(clippy::too_many_arguments)]

pub mod checkpoint;
pub mod domain;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod generation;
pub mod model;
pub mod nn;
pub mod plot;
pub mod real;
pub mod scanet;
pub mod senet;
pub mod style_rep;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
pub use real::Real;
