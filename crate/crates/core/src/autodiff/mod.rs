//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] is rebuilt on every forward pass. Each op appends one node
//! holding its output value and whatever it needs to replay the adjoint.
//! [`Tape::backward`] walks the nodes in exact reverse order and accumulates
//! (`+=`) into the gradient buffer of every input that requires a gradient.
//!
//! ```
//! use poifusion_core::autodiff::Tape;
//! use poifusion_core::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![3.0]), true);
//! let y = tape.mul(x, x).unwrap();
//! let s = tape.sum(y).unwrap();
//! tape.backward(s).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[6.0]);
//! ```

mod gemm;
mod ops;
mod tape;

pub use tape::{Tape, UnaryKind, Var};
