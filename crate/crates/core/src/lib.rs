//! Conditional regression for zero-inflated compositional data.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod composition;
pub mod error;
pub mod linalg;
mod optim;
pub mod penalized;
pub mod regression;
pub mod simulation;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/compositions.md")]
    mod compositions {}
    #[doc = include_str!("../../../book/src/regression.md")]
    mod regression {}
    #[doc = include_str!("../../../book/src/penalized.md")]
    mod penalized {}
    #[doc = include_str!("../../../book/src/simulation.md")]
    mod simulation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
