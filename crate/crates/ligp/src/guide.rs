//! The book's chapters, re-exported as rustdoc pages so their code blocks
//! compile and run with the test suite. The rendered guide lives under
//! `book/` at the repository root; `mdbook build book` produces the HTML.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/kernels.md")]
pub mod kernels {}

#[doc = include_str!("../../../book/src/replication.md")]
pub mod replication {}

#[doc = include_str!("../../../book/src/woodbury.md")]
pub mod woodbury {}

#[doc = include_str!("../../../book/src/neighborhoods.md")]
pub mod neighborhoods {}

#[doc = include_str!("../../../book/src/templates.md")]
pub mod templates {}

#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod pipeline {}

#[doc = include_str!("../../../book/src/benchmarks.md")]
pub mod benchmarks {}

#[doc = include_str!("../../../book/src/pricing.md")]
pub mod pricing {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
