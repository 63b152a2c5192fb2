//! Desk-scale fusion of a frozen decoder-only language model with a
//! trainable diffusion transformer for text-to-image rectified flow.
//!
//! The crate is organized bottom-up:
//! - [`tensor`]: dense f64 tensors with reverse-mode autodiff and a
//!   finite-difference gradient oracle,
//! - [`nn`]: transformer sub-layers (masked attention, RMS norm, gated FFN,
//!   timestep conditioning strategies, rotary/absolute positional schemes),
//! - [`llm`]: the frozen text stream with per-layer K/V export,
//! - [`dit`]: the trainable image stream (patchify, blocks, velocity head),
//! - [`fusion`]: the four ways of wiring the two streams together,
//! - [`flow`]: rectified-flow training (objective, AdamW, EMA),
//! - [`sampler`]: Euler sampling with classifier-free guidance and a
//!   text-KV cache,
//! - [`accountant`]: closed-form parameter and FLOP accounting,
//! - [`data`], [`config`], [`checkpoint`], [`harness`]: the operational
//!   surface (synthetic shapes dataset, run configs, persistence, CLI
//!   entry points).

pub mod accountant;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dit;
pub mod error;
pub mod flow;
pub mod fusion;
pub mod harness;
pub mod llm;
pub mod nn;
pub mod sampler;
pub mod tensor;

pub use error::{FuseError, Result};
pub use tensor::Tensor;
