//! Doc-test harness for the book.
//!
//! mdBook cannot run its code fences as tests, so each chapter is included
//! here as the documentation of an empty module; `cargo test --doc`
//! executes every ```rust block. One module per chapter keeps failures
//! attributable to their source file.

#![cfg(doctest)]

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/degradation-models.md")]
pub mod degradation_models {}

#[doc = include_str!("../../../book/src/representations.md")]
pub mod representations {}

#[doc = include_str!("../../../book/src/guided-enhancement.md")]
pub mod guided_enhancement {}

#[doc = include_str!("../../../book/src/cycle-training.md")]
pub mod cycle_training {}

#[doc = include_str!("../../../book/src/temporal-propagation.md")]
pub mod temporal_propagation {}

#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics_analysis {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
