//! hybridmm: a desk-scale hybrid attention / state-space multimodal
//! language model.
//!
//! The crate provides:
//! - a minimal f64 tensor library with reverse-mode autodiff ([`numerics`]),
//! - structured and selective state-space scans and Mamba-style blocks ([`ssm`]),
//! - a configurable hybrid stack of attention, Mamba, and MoE layers ([`layers`]),
//! - any-resolution image tiling, a frozen toy patch encoder, and frame
//!   sampling ([`vision`]),
//! - learnable modality adapters ([`adapter`]),
//! - the two-stage training pipeline with synthetic tasks ([`training`]),
//! - a prefill/decode inference engine with latency and throughput
//!   instrumentation ([`inference`]),
//! - config, checkpoint, and CLI plumbing ([`config`], [`checkpoint`], [`cli`]).

pub mod adapter;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod inference;
pub mod layers;
pub mod numerics;
pub mod ssm;
pub mod training;
pub mod vision;

pub use error::{Error, Result};
