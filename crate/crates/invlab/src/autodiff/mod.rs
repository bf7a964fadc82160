//! Minimal reverse-mode automatic differentiation over dense f64 arrays.
//!
//! Operations are recorded on a [`Tape`] during the forward pass and replayed
//! in reverse by [`Tape::backward`] to accumulate adjoints. The op set is
//! exactly what a policy + simulator rollout needs: broadcasting elementwise
//! arithmetic with `max`/`min` kinks, matrix products, causal dilated 1-d
//! convolution, ELU/softplus/relu activations, reductions, and a handful of
//! structural ops (concat, column/time selection).
//!
//! Conventions, fixed for reproducibility:
//! - all arithmetic is 64-bit;
//! - `max`/`min` route the gradient to the selected operand, ties to the
//!   first operand; `relu` has derivative 0 at 0;
//! - reductions run in a fixed order, so identical inputs give bit-identical
//!   losses and gradients.
//!
//! A tape lives for one training batch rollout and is discarded after the
//! optimizer step.

mod adam;
mod array;
mod tape;

pub use adam::AdamState;
pub use array::Array;
pub use tape::{Tape, Var};
