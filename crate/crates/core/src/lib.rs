//! Sound source localization in images from unlabeled audio-visual pairs.
//!
//! Audio and localized visual features are projected into a shared space
//! and trained with a multiple-instance contrastive objective: each clip
//! must match the best location of its own image better than the best
//! location of any other image in the batch. At inference the audio-visual
//! similarity map is fused with an audio-free objectness prior.
//!
//! Everything runs on a small CPU tensor engine with reverse-mode autodiff
//! ([`autodiff`]) over a synthetic "shape-tone" world ([`synth`]).

pub mod audio;
pub mod checkpoint;
pub mod autodiff;
pub mod config;
pub mod error;
pub mod format;
pub mod inference;
mod kernels;
pub mod localize;
pub mod metrics;
pub mod micl;
pub mod models;
pub mod objectness;
pub mod ops;
pub mod optim;
pub mod pipeline;
pub mod synth;
pub mod tensor;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
