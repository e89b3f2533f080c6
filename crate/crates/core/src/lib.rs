//! Flexible-depth encoder-decoder transformers.
//!
//! One set of weights is trained to decode at every `(encoder, decoder)`
//! depth pair drawn from the divisors of the full stack depths. Each depth
//! runs a fixed sub-network chosen by an assignment strategy, and training
//! sums gradients over all depth pairs before every optimizer update.
//!
//! The crate is organized bottom-up:
//!
//! - [`depth_space`]: divisor depth sets and the task grid.
//! - [`assignment`]: sub-network strategies and the LayerDrop pruning rule.
//! - [`metrics`]: task balance and average layer distance of a plan.
//! - [`model`]: a gated toy transformer with hand-written gradients.
//! - [`training`]: pretraining, distillation, multi-task and LayerDrop fine-tuning.
//! - [`evaluation`]: per-depth accuracy grids and comparison reports.
//! - [`pipeline`]: config-driven runs of all stages, as used by the `flexdepth` binary.
//!
//! The guide in `book/` walks through each layer with runnable examples.

pub mod assignment;
pub mod data;
pub mod depth_space;
pub mod error;
pub mod evaluation;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};

/// Code samples from the guide, compiled and run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/depth_space.md")]
    mod depth_space {}
    #[doc = include_str!("../../../book/src/assignment.md")]
    mod assignment {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
