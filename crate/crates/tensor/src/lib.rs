//! Minimal reverse-mode automatic differentiation over dense `N,C,H,W` tensors.
//!
//! Everything the image models need is a recorded primitive on a [`Graph`]:
//! convolution, batch normalization, pooling, nearest upsampling, linear
//! layers, cross-entropy, reductions, plus two gradient-routing ops,
//! [`Graph::stop_gradient`] and [`Graph::straight_through`].
//!
//! The element type is generic ([`Scalar`]): models train in `f32`, and the
//! same code runs in `f64` for [`finite_difference_check`].

mod error;
mod gradcheck;
mod graph;
mod kernels;
mod scalar;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{
    finite_difference_check, finite_difference_check_with, relative_error, GradCheckOptions,
    GradCheckReport,
};
pub use graph::{BatchNormOutput, BnMode, Graph, Reduction, RunningStats, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;
