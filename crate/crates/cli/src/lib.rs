//! Pipeline stages behind the `kedit` binary: data generation, model and
//! disentangler training, editing and evaluation.

pub mod config;
pub mod error;
pub mod pipeline;
