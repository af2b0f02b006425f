//! Doc-test anchors for the guide in `book/`.
//!
//! mdbook cannot run snippets against crate dependencies, so every chapter
//! is included here as module documentation and `cargo test --doc`
//! compiles and runs each code block. The rendered book and the tested
//! snippets are the same files by construction.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/programs.md")]
pub mod programs {}

#[doc = include_str!("../../../book/src/backends.md")]
pub mod backends {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/bootstrapping.md")]
pub mod bootstrapping {}

#[doc = include_str!("../../../book/src/proposal.md")]
pub mod proposal {}

#[doc = include_str!("../../../book/src/surrogate.md")]
pub mod surrogate {}

#[doc = include_str!("../../../book/src/optimizers.md")]
pub mod optimizers {}

#[doc = include_str!("../../../book/src/synthetic.md")]
pub mod synthetic {}
