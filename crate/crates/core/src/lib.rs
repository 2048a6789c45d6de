// `!(x > 0.0)` is how config checks reject NaN along with nonpositive values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod ccmp;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod federation;
pub mod gradcheck;
pub mod model;
pub mod rng;

pub use error::{CoreError, Result};
