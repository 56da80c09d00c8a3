#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod autodiff;
pub mod cells;
pub mod error;
pub mod harness;
pub mod imagination;
pub mod kv;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod world;

pub use error::{Error, Result};
