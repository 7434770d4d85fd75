//! Dense numeric kernel shared by every model in the crate.
//!
//! Everything here is deterministic: given identical inputs and rng seeds the
//! kernels produce bitwise-identical results, because summation order is fixed
//! and parameters are always visited in name order.

mod adam;
mod gradcheck;
mod ops;
mod params;
mod real;
mod rng;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::finite_difference_check;
pub use ops::{
    add_outer, axpy, cross_entropy_with_grad, dot, linear_forward_backward, mat_vec, relu,
    sigmoid, softmax, vec_mat, vec_mat_acc, LinearGrads,
};
pub use params::{xavier_uniform, ParamId, ParamStore};
pub use real::{Precision, Real};
pub use rng::RngStream;
pub use tensor::Tensor;
