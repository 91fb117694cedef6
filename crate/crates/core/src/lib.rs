//! Hierarchical autoregressive slot VAE with ordered imagination rollouts.
//!
//! A scene is explained by K per-object latent "slots" drawn from an
//! autoregressive prior that is itself conditioned on a global scene-level
//! latent. Inference runs in three stages: segregate an image into randomly
//! ordered slots, relate them into a scene posterior, then imagine a prior
//! rollout whose order is imposed back onto the slots by matching. Everything
//! here is CPU-only and deterministic given a seed.


pub mod error;

pub mod gemm;


pub mod nn;
pub mod prob;

pub mod rng;
pub mod scene;

pub mod tensor;


pub use error::{Error, Result};
pub use gemm::Scalar;
pub use tensor::Tensor;
