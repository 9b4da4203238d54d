//! Post-training quantization of diffusion transformers with time-aware
//! rotations.
//!
//! The pipeline per linear layer `y = x w`:
//!
//! 1. [`smoothing`] migrates per-channel activation range into the weights.
//! 2. [`rotation`] builds greedy block-diagonal rotations around a zigzag
//!    channel permutation; activations and weights are transformed so that
//!    the product is unchanged.
//! 3. [`timebank`] keeps one parameter set per denoising timestep (or
//!    timestep bucket) and quantizes activations dynamically per token.
//! 4. [`attention`] finds transformer blocks whose conditional and
//!    unconditional attention agree at every timestep and lets the
//!    unconditional branch reuse the conditional attention.
//!
//! [`toydit`] is a small diffusion transformer with classifier-free guidance
//! used to exercise all of it end to end, and [`formats`] holds the binary
//! trace and bank files and the JSON report written by the `trdq` binary.

pub mod attention;
pub mod cli;
pub mod error;
pub mod formats;
pub mod quant;
pub mod rng;
pub mod rotation;
pub mod smoothing;
pub mod tensor;
pub mod timebank;
pub mod toydit;

pub use error::{Result, TrdqError};
pub use quant::{
    dequantize, fake_quantize, quant_error, quantize, Granularity, QuantConfig, QuantMetrics,
    QuantizedTensor,
};
pub use rotation::{
    assemble_balancing, assemble_balancing_with, BalancingParams, BalancingToggles, BlockRotation,
    RotationBlock, RotationBuildConfig,
};
pub use smoothing::{apply_smoothing, compute_delta, SmoothingDiag};
pub use tensor::{Axis, PermutationVector, Scope, Tensor2D};
