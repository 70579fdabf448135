//! Dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! ```text
//! ParamStore ──param()──► Graph (one per forward pass) ──backward()──► Gradients
//!                             │
//!                             └── value(var) / grad(var)
//! ```
//!
//! Every model block in the workspace is written against [`Graph`]; the same
//! code runs in `f32` for training and in `f64` under [`grad_check`].

mod error;
mod gradcheck;
mod graph;
mod param;
mod scalar;
mod tensor;

pub use error::{NumericsError, Result};
pub use gradcheck::{grad_check, GradCheckReport, FD_STEP};
pub use graph::{Conv1dSpec, Graph, Unary, Var};
pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tensor::Tensor;
