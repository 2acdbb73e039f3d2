//! Numeric substrate for the editing lab: row-major `f64` tensors, a tape
//! for reverse-mode gradients, Cholesky solves, finite-difference gradient
//! checks, AdamW, and a binary tensor container.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod linalg;
pub mod optim;
pub mod tensor;

pub use error::{NumericsError, Result};
pub use gradcheck::{grad_check, grad_check_at, numeric_gradient};
pub use graph::{gelu, log_sum_exp, Gradients, Graph, Var};
pub use linalg::{solve_spd, Cholesky};
pub use optim::{AdamW, AdamWConfig};
pub use tensor::Tensor;
