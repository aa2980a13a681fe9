//! Degradation-aware real-time video enhancement.
//!
//! The pipeline has three learned pieces and one physical one:
//!
//! * a **degradation encoder** that turns an image into an implicit
//!   representation of *how* it is degraded, pretrained contrastively;
//! * a **guided enhancer**: window attention whose value vectors are gated
//!   by the compressed degradation representation, reconstructing at ×s
//!   via sub-pixel convolution;
//! * a **temporal propagator** that predicts the next frame's compressed
//!   representation from recent history, so the expensive encoder only
//!   runs on key frames;
//! * **predefined degradation models** — explicit noise/blur/light/smoke
//!   operators — that serve as the reverse generator in cycle-consistent
//!   adversarial training.
//!
//! See the `book/` guide for a narrative walk-through of each piece.

pub mod error;
pub mod rng;
pub mod tensor;
pub mod nn;
pub mod imaging;
pub mod degrade;
pub mod linalg;
pub mod metrics;
pub mod fixtures;
pub mod encoder;
pub mod enhancer;
pub mod cycle;
pub mod propagation;
pub mod data;
pub mod train;
pub mod video;

mod book;

pub use error::{Error, Result};
