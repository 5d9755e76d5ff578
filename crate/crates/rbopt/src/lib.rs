//! Certified reduced-order models for parametrized linear-quadratic optimal
//! control of linear time-varying systems.
//!
//! The narrative guide lives in `book/`; its Rust snippets compile and run
//! as doc-tests of this crate (see the `book` module below).

pub mod error;
pub mod linalg;
pub mod cookie;
pub mod estimators;
pub mod fom;
pub mod ltv;
pub mod pod;
pub mod rom;
pub mod strategies;

pub use error::{Error, Result};

// The book chapters double as doc-tests: every Rust snippet in the guide
// is compiled and executed by `cargo test --doc`.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/spaces.md")]
    mod spaces {}
    #[doc = include_str!("../../../book/src/systems.md")]
    mod systems {}
    #[doc = include_str!("../../../book/src/fom.md")]
    mod fom {}
    #[doc = include_str!("../../../book/src/pod.md")]
    mod pod {}
    #[doc = include_str!("../../../book/src/rom.md")]
    mod rom {}
    #[doc = include_str!("../../../book/src/estimators.md")]
    mod estimators {}
    #[doc = include_str!("../../../book/src/strategies.md")]
    mod strategies {}
    #[doc = include_str!("../../../book/src/benchmark.md")]
    mod book_benchmark {}
}
