//! Peephole LSTM sequence learning with built-in handling of missing inputs
//! and targets.
//!
//! The numeric core ([`lstm`], [`bptt`], [`optimizer`], [`eval`]) is generic
//! over [`Scalar`] (`f32` or `f64`); the aliases below fix it to `f64`,
//! which the cohort pipeline and the CLI use.

// `!(a < b)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bptt;
pub mod cohort;
pub mod config;
pub mod error;
pub mod eval;
pub mod imputation;
pub mod lstm;
pub mod masked_data;
pub mod matrix;
pub mod optimizer;
pub mod pipeline;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix = matrix::Matrix<f64>;
pub type LstmParameters = lstm::LstmParameters<f64>;
pub type ForwardCache = lstm::ForwardCache<f64>;
pub type GradientSet = bptt::GradientSet<f64>;
pub type BackwardState = bptt::BackwardState<f64>;
pub type MaskedSequence = masked_data::MaskedSequence<f64>;
pub type MaskedBatch = masked_data::MaskedBatch<f64>;
pub type NormalizationFactors = masked_data::NormalizationFactors<f64>;
pub type OptimizerState = optimizer::OptimizerState<f64>;
pub type LdaModel = eval::LdaModel<f64>;
pub type ScoredVisit = eval::ScoredVisit<f64>;
