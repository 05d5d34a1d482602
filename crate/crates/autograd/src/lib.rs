//! Dense `f64` tensors with a reverse-mode tape.
//!
//! ```
//! use cfn_autograd::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(&[1.0, 2.0]));
//! let loss = x.square().sum().unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
//! ```

mod error;
pub mod gradcheck;
pub mod ops;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{check_gradients, finite_diff_grad, max_relative_error, GradCheck};
pub use ops::{concat, sigmoid, ReduceKind, WindowKind};
pub use tape::{BackwardCtx, BackwardFn, NodeInfo, Tape, Var};
pub use tensor::{broadcast_shape, broadcast_strides, numel, strides, Tensor};
