//! Numerical kernels on a reverse-mode tape.
//!
//! [`Graph`] records the forward pass; each layer in [`kernels`] has a graph
//! form (used by the model) and an array form (used for direct evaluation).
//! [`grad_check`] compares tape gradients with central differences.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;

pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use graph::{BatchStats, Conv2dSpec, Gradients, Graph, Tensor, Var};
pub use kernels::{
    dropout_mask, focal_loss, gated_gelu_ffn, multi_head_attention, preact_residual_block, softmax,
    talking_heads_attention, AttentionParams, AttentionResult, BnMode, FfnParams,
};
pub use optim::{adam_step, AdamConfig, OptimizerState};
pub use params::{Checkpoint, ParamStore};
