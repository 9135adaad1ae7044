//! DeiT-style pre-norm transformer encoder with a single-logit head.
//!
//! Gradients are derived by hand for every layer (see `backward`), so the
//! whole model runs in either `f32` or `f64` without an autodiff tape.

mod backward;
mod config;
mod forward;
mod params;

pub use backward::{bce_with_logit, loss_and_grads, P_MIN};
pub use config::ViTConfig;
pub use forward::{
    classify, encoder_forward, forward, mhsa_forward, predict, sigmoid, AttentionStack, LN_EPS,
};
pub use params::{parameter_shapes, BlockParams, ModelParams};
