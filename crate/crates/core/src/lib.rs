//! Deterministic simulator for federated training of a growing suite of
//! dense models.
//!
//! The round loop assigns each participant one model it can afford, trains
//! locally, aggregates within and across models, and grows the largest model
//! by function-preserving widen/deepen steps once its loss flattens out.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregate;
pub mod checkpoint;
pub mod clients;
pub mod datagen;
pub mod error;
pub mod model;
pub mod nn;
pub mod rng;
pub mod runtime;
pub mod tensor;
pub mod transformer;

pub use error::{Error, Result};
pub use model::{mac_count, Activation, Batch, Cell, CellId, CellOrigin, Model, ModelId, WeightSet};
pub use tensor::Tensor;
