//! Locally induced Gaussian process surrogates for large stochastic
//! simulation experiments.
//!
//! The library fits a separate small GP around every prediction site,
//! conditioning on the nearest *unique* design locations and compressing
//! replicated simulation runs into sufficient statistics. A low-rank
//! inducing-point approximation combined with a second Woodbury application
//! over replicates keeps every matrix at `m x nbar` or smaller, regardless of
//! how many raw runs back the design. Local nugget estimation makes the
//! scheme noise-aware, which is what stochastic simulators need.
//!
//! The crate ships the full pipeline: kernel and jitter policy
//! ([`kernel`]), design compression and pre-scaling ([`design`]), exact
//! nearest-neighbor neighborhoods ([`neighborhood`]), replication-aware
//! likelihood, gradient, and prediction ([`woodbury`]), inducing-point
//! templates ([`templates`]), the batched prediction pipeline ([`model`]),
//! benchmark simulators and metrics ([`bench`]), and a regression Monte
//! Carlo Bermudan max-call pricer ([`pricer`]). A command-line interface
//! (`ligp`) wires these into reproducible seeded runs.
//!
//! The accompanying mdbook guide under `book/` walks through the method;
//! its code snippets are compiled as doc-tests via [`guide`].

pub mod bench;
pub mod cli;
pub mod design;
pub mod error;
pub mod kernel;
pub mod lhs;
pub mod manifest;
pub mod model;
pub mod neighborhood;
pub mod optim;
pub mod pricer;
pub mod rng;
pub mod stats;
pub mod templates;
pub mod woodbury;

pub mod guide;

pub use error::{Error, Result};
