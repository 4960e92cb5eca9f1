//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Computations are recorded on a [`Graph`] as they run; [`Graph::backward`]
//! replays the tape in reverse and returns gradients for every leaf created
//! with `requires_grad`. Tensors are generic over [`Scalar`] so the same model
//! code runs in `f32` for training and in `f64` for [`grad_check`].

mod error;
mod gradcheck;
mod graph;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, relative_error, CoordCheck, GradCheckOptions, GradCheckReport};
pub use graph::{Faults, Gradients, Graph, Reduction, Var, LAYER_NORM_EPS};
pub use scalar::Scalar;
pub use tensor::Tensor;
