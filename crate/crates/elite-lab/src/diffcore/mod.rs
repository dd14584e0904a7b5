//! Differentiable dense-tensor engine: forward kernels, reverse-mode
//! gradient accumulation on a tape, a parameter registry, an
//! adaptive-moment optimizer, and finite-difference gradient checking.
//! Generic over `f32` (training default) and `f64` (gradient checks).

pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_diff_check, rel_err, FdReport};
pub use optim::OptimizerState;
pub use params::{ParamRef, ParamSet};
pub use tape::{matmul_raw, Gradients, Tape, Var};
pub use tensor::{cosine_similarity, sq_l2_distance, Scalar, Tensor};
