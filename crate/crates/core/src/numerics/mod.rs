//! Tensor substrate: dense f64 storage, reverse-mode autodiff, seeded
//! initialization, and the raw kernels shared with the inference path.

pub mod grad_check;
pub mod linalg;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use grad_check::{grad_check, grad_check_param, GradCheckReport};
pub use rng::Rng;
pub use tensor::{no_grad, Tensor};
