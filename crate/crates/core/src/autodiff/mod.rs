//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Values are recorded on a [`Tape`] as they are computed. Each recorded
//! node keeps its inputs and a backward rule; [`Var::backward`] walks the
//! tape once in reverse insertion order, which is a topological order
//! because a node can only reference nodes recorded before it.
//!
//! ```
//! use mat_core::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let p = tape.param(&Tensor::vector(vec![1.0, 2.0]));
//! let loss = p.square().sum();
//! let grads = loss.backward().unwrap();
//! assert_eq!(grads.get(p).unwrap(), &[2.0, 4.0]);
//! ```
//!
//! Broadcasting is limited to per-row vectors (`add_row`, `mul_row`) and
//! leading batch axes of `matmul`.

pub mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
