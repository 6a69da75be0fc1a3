//! Deterministic gates with an expected-L0 penalty for pruning small networks.
//!
//! Each gated partition turns trainable logits into gates that are either zero
//! or near one. The expected number of enabled gates has a closed form, so it
//! is added to the training loss, and disabled units are cut out of the
//! trained network. The guide in `book/` walks through every module.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod gates;
pub mod model;
pub mod sparsity;
pub mod special;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Graph, PrimitiveKind, Var};
pub use tensor::{Tensor, TensorError};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/gates.md")]
    mod gates {}
    #[doc = include_str!("../../../book/src/probabilities.md")]
    mod probabilities {}
    #[doc = include_str!("../../../book/src/risk.md")]
    mod risk {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
}
