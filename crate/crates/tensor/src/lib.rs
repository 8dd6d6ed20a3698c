//! Dense tensors with tape-based reverse-mode automatic differentiation.
//!
//! [`Tensor`] is an immutable row-major array. Differentiable computations
//! are recorded on a [`Tape`] through [`Var`] handles and differentiated
//! with [`Tape::backward`]. The crate also provides the FBT1 tensor file
//! format, a named [`ParamStore`] with an archive format for checkpoints,
//! the [`Adam`] optimizer and finite-difference [`gradcheck`] utilities.
//!
//! ```
//! use rgbh_tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

pub mod element;
pub mod error;
pub mod fbt;
pub mod gradcheck;
pub mod init;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use element::{DType, Element};
pub use error::{Result, TensorError};
pub use fbt::FormatError;
pub use optim::{Adam, AdamConfig};
pub use params::ParamStore;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
