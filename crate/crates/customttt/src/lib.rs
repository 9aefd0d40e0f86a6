//! Desk-scale video diffusion lab.
//!
//! A tiny layered video denoiser trained on procedural sprite videos, with
//! selective-layer low-rank adapters for appearance and motion, per-layer
//! prompt-injection analysis, test-time training for combining independently
//! trained adapters, and deterministic proxy metrics for scoring results.

pub mod analysis;
pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod lora;
pub mod model;
pub mod real;
pub mod rng;
pub mod scheduler;
pub mod train;
pub mod ttt;

pub use error::{Error, Result};
pub use real::{Dtype, Real};
