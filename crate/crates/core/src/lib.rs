//! Phrase grounding by query-guided box regression with a context policy.
//!
//! The crate trains three cooperating networks end to end on a synthetic
//! scene corpus: a proposal generator over a feature grid ([`pgn`]), a
//! query-conditioned ranker/regressor ([`qrn`]) and a context reward model
//! whose prediction drives a policy-gradient term ([`cpn`]). Everything
//! differentiable runs on the small autodiff engine in [`tensor`].

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod cpn;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradsuite;
pub mod pgn;
pub mod pipeline;
pub mod qrn;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
