//! Minimal dense tensors with reverse-mode automatic differentiation.
//!
//! Every primitive records itself on an implicit tape when any input
//! requires a gradient; [`Tensor::backward`] replays the tape in reverse
//! creation order. The crate is CPU-only and single-threaded per graph.
//!
//! ```
//! use mstat_tensor::Tensor;
//!
//! let x = Tensor::<f64>::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
//! let loss = x.mul(&x).unwrap().sum_all().unwrap();
//! let grads = loss.backward().unwrap();
//! assert_eq!(grads.get(&x).unwrap(), &[2.0, 4.0, 6.0]);
//! ```

mod check;
pub mod counter;
mod element;
mod error;
pub mod fault;
pub mod io;
mod ops;
mod tensor;

pub use check::{finite_diff_grad, relative_error};
pub use counter::{measure_macs, with_mac_kind, MacCounts, MacKind};
pub use element::{DType, Element};
pub use error::{Result, TensorError};
pub use tensor::{Gradients, Tensor};

/// Default layer-norm epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Default epsilon guarding L1 normalization of all-zero lanes.
pub const L1_NORM_EPS: f64 = 1e-6;
