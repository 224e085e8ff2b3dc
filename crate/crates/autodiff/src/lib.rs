//! Dense row-major tensors and a tape for reverse-mode differentiation.
//!
//! Operations are recorded on a [`Tape`] as they run. Calling
//! [`Tape::backward`] on a scalar consumes the tape and returns the
//! gradient of every leaf that was registered with `requires_grad`.
//!
//! ```
//! use factr_autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::scalar(3.0), true);
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

mod error;
mod gradcheck;
mod kernels;
mod real;
mod shape;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_many, GradCheckReport};
pub use real::Real;
pub use shape::{broadcast_shapes, numel};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
