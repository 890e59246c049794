//! Automatic multi-step distillation for miniature vision transformers.
//!
//! The crate is `no_std` (with `alloc`) and carries every numerical piece of
//! the compression pipeline:
//!
//! - [`tape`]: a dense `f64` tensor type with a reverse-mode gradient tape,
//!   plus the loss functions and optimizer used for distillation.
//! - [`model`]: a mini ViT whose attention heads and MLP hidden units can be
//!   gated off by a [`StructuralMask`], and a compact materialized form.
//! - [`pruning`]: importance estimation, scale gridding and construction of a
//!   nested [`CandidateFamily`].
//! - [`distill`]: parameter-shared joint distillation of all candidates,
//!   pairwise distillation, and the manual sweep used as a reference.
//! - [`selection`]: the negative performance-scale derivative and
//!   teacher-assistant selection.
//!
//! File formats, dataset readers and the command-line driver live in the
//! companion `amd` crate.
#![cfg_attr(not(feature = "std"), no_std)]
// `!(a < b)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod data;
pub mod distill;
pub mod gradcheck;
mod error;
mod kernels;
pub mod loss;
mod math;
pub mod model;
pub mod optim;
pub mod pruning;
pub mod selection;
pub mod tape;
pub mod tensor;

pub use data::{Batch, LabeledImages};
pub use distill::{DistillConfig, PassLedger, TrainReport};
pub use error::{Error, Result};
pub use model::{ModelConfig, ParameterStore, StructuralMask};
pub use pruning::{CandidateFamily, ImportanceScores, ScaleGrid};
pub use selection::{NpsdRecord, SelectionInput};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
