// SPDX-License-Identifier: Apache-2.0

//! Online changepoint detection with model selection over a universe of
//! conjugate (spatially structured) Bayesian vector autoregressions.

// Negated float comparisons are deliberate: they treat NaN as failure.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bvar;
pub mod cli;
pub mod engine;
pub mod error;
pub mod evalgen;
pub mod hyperopt;
pub mod math;
pub mod spatial;

pub use error::{Error, Result};
