//! Dense `f64` tensors with define-by-run reverse-mode differentiation.

mod attention;
mod gradcheck;
mod graph;
mod linalg;
mod tensor;

pub use attention::{AttnSegment, AttnSpec};
pub use gradcheck::{finite_diff_check, finite_diff_check_all, relative_error};
pub use graph::{Graph, Var};
pub use linalg::gemm;
pub use tensor::Tensor;
