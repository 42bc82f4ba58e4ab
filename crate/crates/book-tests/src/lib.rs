//! Every chapter of the guide under `book/src` is included here as module
//! documentation, so `cargo test` runs its listings as doc-tests. One module
//! per chapter keeps failures traceable to a file.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/command-line.md")]
pub mod command_line {}
#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}
#[doc = include_str!("../../../book/src/concepts.md")]
pub mod concepts {}
#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}
#[doc = include_str!("../../../book/src/model.md")]
pub mod model {}
#[doc = include_str!("../../../book/src/retrieval.md")]
pub mod retrieval {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/formats.md")]
pub mod formats {}
