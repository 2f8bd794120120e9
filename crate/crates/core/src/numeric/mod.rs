//! Dense matrices, Gaussian special functions, reverse-mode gradients and
//! their finite-difference check.

pub mod gradcheck;
pub mod graph;
pub mod matrix;
pub mod special;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId};
pub use matrix::{softmax, softmax_rows, Matrix};
pub use special::{gelu, normal_cdf, normal_pdf};
