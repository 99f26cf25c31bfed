//! Flow matching with continuous-time consistency training for few-step
//! action generation.
//!
//! The pieces, bottom-up: a small reverse-mode [`tensor`] engine, seeded
//! [`rng`] streams, [`time_sampling`] distributions, the [`flow`]
//! objectives, the velocity networks in [`model`], Euler [`inference`],
//! the [`train`] loop and the benchmark [`tasks`].

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod flow;
pub mod inference;
pub mod model;
pub mod rng;
pub mod tasks;
pub mod tensor;
pub mod time_sampling;
pub mod train;

pub use error::{Error, Result};
