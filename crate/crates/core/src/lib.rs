//! Desk-scale laboratory for regression bias in long-tailed two-stage detection.
//!
//! The crate synthesizes long-tailed box-regression benchmarks
//! ([`dataset`]), trains affine regression heads in several parameterizations
//! ([`heads`], [`training`]), and evaluates them with COCO-style AP split by
//! frequency group ([`evaluation`]). [`experiments`] orchestrates seeded
//! sweeps over head variants and [`plots`] renders the resulting curves.

pub mod dataset;
pub mod digest;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod geometry;
pub mod heads;
pub mod plots;
pub mod training;

pub use error::{Error, Result};
