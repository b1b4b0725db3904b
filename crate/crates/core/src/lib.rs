//! Simulation and analysis of sticky reflected Brownian motion in the
//! orthant: reflected paths, the sticky time change, stationary estimators,
//! tail diagnostics and the large-deviation rate.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ensemble;
pub mod error;
pub mod ldp;
pub mod linalg;
pub mod lp;
pub mod model;
pub mod reflect;
pub mod scalar;
pub mod stationary;
pub mod sticky;
pub mod tails;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix64 = linalg::Matrix<f64>;
pub type Matrix32 = linalg::Matrix<f32>;
pub type ModelSpec64 = model::ModelSpec<f64>;
pub type ModelSpec32 = model::ModelSpec<f32>;
pub type SrbmPath64 = reflect::SrbmPath<f64>;
pub type SrbmPath32 = reflect::SrbmPath<f32>;
pub type StickyPath64 = sticky::StickyPath<f64>;
pub type StickyPath32 = sticky::StickyPath<f32>;
pub type EnsembleResult64 = ensemble::EnsembleResult<f64>;
pub type PathVariable64 = ldp::PathVariable<f64>;
pub type RateResult64 = ldp::RateResult<f64>;
