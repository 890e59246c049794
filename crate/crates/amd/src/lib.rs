//! Harness around `amd-core`: synthetic and CIFAR-10 data, the `AMDC`
//! checkpoint container, metrics CSV, run configuration and the staged
//! pipeline used by the `amd` binary.

// `!(a < b)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod stats;

pub use config::RunConfig;
pub use error::{HarnessError, Result};
