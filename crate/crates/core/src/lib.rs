//! Likelihood-based generative models for categorical data.
//!
//! Two model families live here:
//!
//! * **Argmax flows**: a continuous density `p(v)` over `R^{D x K}` composed
//!   with a per-dimension argmax. Training uses a variational posterior
//!   `q(v|x)` whose support is restricted to the argmax region of `x`
//!   ([`surjections`]), so the lower bound `log p(v) - log q(v|x)` is always
//!   finite ([`density`]).
//! * **Multinomial diffusion**: a Markov chain that resamples categories
//!   uniformly with a small probability per step, and a learned reverse chain
//!   parametrized through the closed-form posterior ([`diffusion`]).
//!
//! Everything is computed in log space in 64-bit floats ([`numerics`]) on top
//! of a small reverse-mode tape ([`autodiff`]). The crate is `no_std` with
//! `alloc`; file formats and the command-line tool live in the `catflow`
//! crate.

#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

mod error;
pub(crate) mod math;

pub mod autodiff;
pub mod data;
pub mod density;
pub mod diffusion;
pub mod numerics;
pub mod schedule;
pub mod surjections;
pub mod train;
pub mod verify;

pub use error::{Error, Result};

/// Seedable generator used throughout the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Build the crate's generator from a 64-bit seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}
