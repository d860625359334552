//! Multi-objective sequential retriever: a decoder-based user tower that
//! emits one embedding per objective, per-objective item towers, contrastive
//! training, per-objective indices with quota allocation, and offline
//! evaluation. The guide in `book/` walks through each part.

pub mod data;
mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod retrieval;

pub use error::{Error, Result};

/// Book chapters compiled as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/retrieval.md")]
    mod retrieval {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
