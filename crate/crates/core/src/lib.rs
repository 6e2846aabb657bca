//! Speculative decoding with position-specialized draft layers.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: row-major tensors, a reverse-mode tape and AdamW.
//! * [`model`]: the byte-level target transformer, KV caches, sampling and
//!   the checkpoint container.
//! * [`draft`]: feature-conditioned draft layers and the specialist bank
//!   that routes draft positions to layers.
//! * [`training`]: corpus distillation and the teacher-forced, multi-step
//!   and position-specialized training regimes.
//! * [`engine`]: the draft, verify and commit generation loop.
//! * [`metrics`]: acceptance counters, timing decomposition and reports.

pub mod draft;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
