//! Dense 64-bit tensors with a recording tape for reverse-mode gradients.
//!
//! Every neural component of the workspace is built from the operations on
//! [`Tape`]. A forward pass records each operation together with enough
//! saved state to apply its local gradient rule; [`Tape::backward`] walks the
//! record in reverse and populates gradients on every tensor that requires
//! them.
//!
//! ```
//! use dyhgn_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap(), true);
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
//! ```

mod error;
pub mod gradcheck;
mod kernels;
mod optim;
mod rng;
mod sparse;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use optim::{AdamW, AdamWConfig};
pub use rng::{dropout_mask, stream_seed};
pub use sparse::CsrMatrix;
pub use tape::{Activation, AggregateMode, Tape, Var};
pub use tensor::Tensor;
