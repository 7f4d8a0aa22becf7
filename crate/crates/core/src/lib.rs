//! Focused continual test-time adaptation at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! - [`engine`]: tensors, kernels and a reverse-mode tape that retains only
//!   the activations a given trainable set actually needs.
//! - [`nn`]: the reference CNN, layer tagging (representation / BN /
//!   classifier), frozen snapshots and checkpoints.
//! - [`memory`]: the analytic backprop memory model and its reconciliation
//!   with bytes measured on the tape.
//! - [`data`]: procedural shape dataset, corruptions, augmentations and
//!   continual domain streams.
//! - [`warmup`]: augmentation warm-up that ranks representation layers by
//!   gradient norm and emits an [`warmup::AdaptationPlan`].
//! - [`ctta`]: entropy filtering, feature regularization, Adam and the online
//!   adaptation loop with baseline strategies.
//! - [`experiment`]: configuration, pretraining and the artifact pipeline the
//!   CLI drives.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ctta;
pub mod data;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod memory;
pub mod nn;
pub mod rng;
pub mod warmup;

pub use engine::{BnMode, Graph, LayerId, ParamId, Precision, Tensor, TrainableSet};
pub use error::{Error, Result};
pub use memory::MemoryReport;
pub use nn::{FrozenModel, Model};
