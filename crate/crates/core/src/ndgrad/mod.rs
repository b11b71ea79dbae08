//! Dense arrays and a small reverse-mode differentiation engine.
//!
//! A [`Graph`] is rebuilt for every minibatch. Parameters enter as
//! [`Graph::param`] leaves, data as [`Graph::input`] constants, and
//! [`Graph::backward`] returns a [`Gradients`] set for every parameter.

mod array;
mod conv;
pub mod gradcheck;
mod graph;
mod resample;

pub use array::{DenseArray, Real};
pub use gradcheck::{analytic_gradients, grad_check, grad_check_against, relative_error, ErrorMeasure, GradCheckConfig, GradCheckReport, TensorCheck};
pub use graph::{Gradients, Graph, Var};
pub use resample::ResamplePlan;
