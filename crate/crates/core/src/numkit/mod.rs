//! Dense linear algebra, losses and a reproducible random number generator.

mod loss;
mod matrix;
mod rng;

pub use loss::{argmax_rows, cross_entropy_logits, mse};
pub use matrix::{elementwise, sigmoid, ElementwiseOp, Matrix};
pub use rng::{rng_gaussian, rng_uniform, Rng};
