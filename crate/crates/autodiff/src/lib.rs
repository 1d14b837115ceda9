//! Reverse-mode automatic differentiation over dense, row-major `f64` arrays.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! replays the records in reverse and accumulates gradients into the leaves
//! that asked for them. The tape is rebuilt for every forward pass, so there
//! is no graph serialization and no operator fusion.
//!
//! ```
//! use avm_autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0), true);
//! let y = tape.mul(x, x).unwrap();
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(x).unwrap().as_ref(), &[6.0]);
//! ```

mod error;
pub mod gradcheck;
mod tape;
mod tensor;

pub use error::AutodiffError;
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use tape::{Activation, Reduction, Tape, Var};
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, AutodiffError>;
