//! Chunked multi-reference inference for a small decoder-only transformer.
//!
//! The vision segment of a prompt is split into `n` interleaved chunks that
//! each run alongside the shared system prompt and question. Question rows
//! are fused across chunks by attention-derived gating weights, and at a
//! chosen layer the chunks are pruned and merged back into one sequence.

pub mod attention;
mod block;
pub mod cli;
pub mod engine;
pub mod error;
pub mod flops;
pub mod fusion;
pub mod model;
pub mod numerics;
pub mod partition;
pub mod routing;

pub use block::argmax;
pub use error::{Error, Result};
