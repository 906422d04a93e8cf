//! Dense reverse-mode differentiation.
//!
//! A [`Tape`] records each primitive as it is evaluated; [`Tape::backward`]
//! walks the record in reverse and returns gradients for every parameter leaf
//! that contributed to the scalar loss. Values are `f64` throughout and every
//! op rejects non-finite results.

pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use params::{sgd_step, ParamStore, Sgd};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
