//! Multi-process inference pipeline engine.
//!
//! A foundation worker computes labeled feature tensors once per frame and
//! publishes them into a shared-memory channel; any number of head workers,
//! each in its own process and behind its own rate gate, lease the newest
//! frame and copy only the labels they need.

pub mod channels;
pub mod clock;
pub mod control;
pub mod demo;
pub mod error;
pub mod futex;
pub mod metrics;
pub mod pipeline;
pub mod registry;
pub mod shm;
pub mod stress;
pub mod tensor_arena;

#[cfg(test)]
mod test_support;

pub use error::{Error, Result};
