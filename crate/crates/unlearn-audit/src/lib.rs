//! Desk-scale harness for auditing what approximate machine unlearning does
//! to per-sample privacy risk.
//!
//! The pipeline: synthesize or load a dataset, train a pool of classifiers
//! on random halves (optionally with DP-SGD), estimate each sample's
//! greatest TPR/FPR with a likelihood-ratio membership attack, apply an
//! unlearning method, re-estimate, and check two criteria: forget-sample
//! risk must drop, retained-sample risk must stay within the privacy
//! budget.
//!
//! The narrative guide lives in `book/`; its code snippets compile and run
//! as doctests of this crate.

pub mod attack;
pub mod audit;
pub mod data;
pub mod error;
pub mod model;
pub mod risk;
pub mod seeds;
pub mod unlearn;

pub use error::{Error, Result};

// Book chapters double as doctests so the guide can never drift from the
// API. `cargo test --doc` runs every fenced Rust block below.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/attacks.md")]
    mod attacks {}
    #[doc = include_str!("../../../book/src/risk.md")]
    mod risk {}
    #[doc = include_str!("../../../book/src/unlearning.md")]
    mod unlearning {}
    #[doc = include_str!("../../../book/src/auditing.md")]
    mod auditing {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
}
