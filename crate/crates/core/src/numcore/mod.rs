//! Linear algebra and differentiation engine.

pub mod dual;
pub mod jacobian;
pub mod linalg;
pub mod tape;
pub mod tensor;

pub use dual::{Dual2, Scalar};
pub use jacobian::{jacobians_of_f, metric_partials, Acceleration, FPartials, GPartials, MetricField};
pub use linalg::{smallest_abs_eigenvalue, sym_eigen, Mat, Tensor3};
pub use tape::{grad_check, Gradients, Tape, Var};
pub use tensor::{Tensor, TensorLike, Unary};
