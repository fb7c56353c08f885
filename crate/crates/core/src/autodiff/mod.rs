//! Minimal reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation together with its forward value.
//! [`Tape::backward`] walks the tape in reverse creation order and applies the
//! chain rule. Broadcasting is limited to a `(1, n)` right-hand operand being
//! repeated over the rows of an `(m, n)` left operand; every other shape must
//! match exactly.
//!
//! Parameters live in a [`ParamStore`] owned by the model; a tape copies them
//! in as leaves with [`Tape::param`] and [`Gradients::for_params`] hands the
//! gradients back in store order for an [`Adam`] step.

mod adam;
mod gradcheck;
pub mod nn;
mod params;
mod tape;
mod tensor;

pub use adam::Adam;
pub use gradcheck::{check_gradients, GradCheck};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
