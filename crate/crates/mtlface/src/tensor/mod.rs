//! Reverse-mode autodiff on dynamically-shaped `ndarray` tensors.
//!
//! A [`Graph`] records operations as they execute (define-by-run) and
//! [`Graph::backward`] walks the tape in reverse. The element type is
//! generic so that training runs in `f32` while gradient-checking tests run
//! the same code paths in `f64`.

mod conv;
mod graph;
mod ops;

pub use conv::{conv2d_backward, conv2d_forward};
pub use graph::{Graph, Gradients, Var};

use ndarray::LinalgScalar;
use num_traits::{Float, NumAssignOps};

/// Scalar element type of the engine.
pub trait Elem:
    LinalgScalar + Float + NumAssignOps + Send + Sync + std::fmt::Debug + std::fmt::Display + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Elem for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Shorthand for lifting an `f64` literal into the element type.
pub fn el<T: Elem>(v: f64) -> T {
    T::from_f64(v)
}
