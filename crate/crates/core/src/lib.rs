//! Domain generalization by aggregating per-domain posteriors.
//!
//! Building blocks: a small MLP with hand-written backprop ([`nn`]), diagonal
//! Gaussian weight posteriors ([`variational`]), posterior aggregation and
//! coefficient-of-variation dropout ([`aggregate`]), synthetic multi-domain
//! data ([`synth`]), exact finite-model checks ([`oracle`]), the trainers
//! ([`ptg`]) and the leave-one-domain-out harness ([`harness`]).

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregate;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod nn;
pub mod oracle;
pub mod ptg;
pub mod seed;
pub mod synth;
pub mod variational;

pub use error::{Error, Result};
