//! Hidden path selection networks at desk scale.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod hp;
pub mod manifold;
pub mod network;
pub mod nn;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Shape4, Tensor4};

// Book chapters run as doc tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/masks.md")]
    mod masks {}
    #[doc = include_str!("../../../book/src/networks.md")]
    mod networks {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/manifold.md")]
    mod manifold {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
