//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! Gradients can be recorded as graph nodes (`create_graph = true`), which
//! makes exact second-order products available:
//!
//! ```
//! use l2tww_autodiff::{grad, hvp, Graph, Tensor};
//!
//! let g = Graph::new();
//! let x = g.param(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
//! // f = Σ x³
//! let f = x.mul(&x).unwrap().mul(&x).unwrap().sum().unwrap();
//! let dx = grad(&f, &[x.clone()], false).unwrap();
//! assert_eq!(dx[0].value().data(), &[3.0, 12.0]);
//! let h = hvp(&f, &[x], &[Tensor::ones(&[2])]).unwrap();
//! assert_eq!(h[0].data(), &[6.0, 12.0]);
//! ```

mod error;
mod graph;
pub mod kernels;
mod ops;
mod second_order;
mod tensor;

pub use error::{AutodiffError, Result};
pub use graph::{grad, Graph, Var};
pub use kernels::ConvGeom;
pub use second_order::{hvp, hvp_and_mixed, mixed_hvp};
pub use tensor::Tensor;

/// Central finite-difference utilities used by the verification suites.
pub mod check;
