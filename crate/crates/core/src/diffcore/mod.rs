//! Differentiable `f64` substrate: tensors, convolution and normalization
//! kernels, a reverse-mode tape, and a finite-difference gradient checker.

pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod tensor;

pub use conv::{conv2d, conv_transpose2d};
pub use gradcheck::{grad_check, grad_check_report, GradCheckConfig, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId};
pub use ops::{instance_norm2d, l1_mean, INSTANCE_NORM_EPS, LOG_CLAMP};
pub use tensor::{ConvSpec, Shape4, Tensor4};
