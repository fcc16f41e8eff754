//! Skeleton-aware latent diffusion for text-driven motion generation.
//!
//! The pipeline has three stages:
//! 1. a skeleto-temporal VAE that compresses per-joint motion features into a
//!    compact `frames/4 x 7 x 32` latent ([`vae`]),
//! 2. a text-conditioned transformer denoiser trained with v-prediction and
//!    sampled with deterministic DDIM + classifier-free guidance ([`denoiser`],
//!    [`schedule`]),
//! 3. a zero-shot editing controller that modulates the cross-attention maps
//!    captured during sampling ([`editing`]).
//!
//! Everything runs on CPU with `f64` math; batch-level loops use rayon when the
//! `parallel` feature (on by default) is enabled.

pub mod checkpoint;
pub mod denoiser;
pub mod dump;
pub mod editing;
pub mod error;
pub mod motion;
pub mod nn;
pub mod par;
pub mod schedule;
pub mod skeleton;
pub mod st_ops;
pub mod tape;
pub mod text;
pub mod vae;

pub use error::{Error, Result};
