//! Multi-class wound tissue segmentation.
//!
//! The crate implements the full stack needed to train and evaluate a
//! hierarchical-transformer segmentation model on CPU:
//!
//! * [`tensor`]: a small reverse-mode autodiff engine (dense row-major
//!   tensors plus a gradient tape) with exactly the operators the model
//!   needs: convolutions, batch/layer norm, activations, bilinear
//!   upsampling, attention primitives, and reductions.
//! * [`encoder`]: a four-stage Mix-Transformer encoder with overlapped
//!   patch embeddings and sequence-reduced self-attention, producing a
//!   feature pyramid at 1/4, 1/8, 1/16, 1/32 of the input resolution.
//! * [`decoder`]: a convolutional multi-scale fusion decoder that keeps
//!   every intermediate in `[N, C, H, W]` layout, plus the flattening
//!   all-MLP head it is compared against, and the ablation grid over
//!   decoder variants.
//! * [`loss`], [`metrics`], [`stats`]: softmax cross-entropy and
//!   focal+dice objectives, Sorensen-Dice evaluation, and a paired
//!   Wilcoxon signed-rank test.
//! * [`data`]: netpbm (PPM/PGM) codecs, resizing, augmentation, seeded
//!   dataset splits, and a synthetic multi-class wound image generator.
//! * [`train`]: Adam, plateau LR scheduling, early stopping, binary
//!   checkpoints, and the training / ablation / comparison harnesses.
//!
//! Numeric code is generic over [`Scalar`] (f32 or f64). The shipped
//! harnesses instantiate f64; the `*64` aliases below are the intended
//! entry points.

pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
mod error;
pub mod harness;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
mod scalar;
pub mod stats;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Dense tensor with f64 elements, the default precision of the harness.
pub type Tensor64 = tensor::Tensor<f64>;
/// Gradient tape recording f64 operations.
pub type Tape64 = tensor::Tape<f64>;
/// f32 tensor alias for reduced-precision experiments.
pub type Tensor32 = tensor::Tensor<f32>;
/// Gradient tape recording f32 operations.
pub type Tape32 = tensor::Tape<f32>;
/// Full segmentation model (encoder plus decoder head) in f64.
pub type Segmenter64 = model::Segmenter<f64>;
