//! Closed-loop goal-driven image generation and editing controller.
//!
//! A task's instruction is decomposed into goals, edits are scheduled in
//! small batches, each candidate is verified against every goal, and
//! regressions are rolled back. Backends are pluggable: a deterministic
//! simulated world for offline work, or HTTP chat-completion endpoints.

pub mod actions;
pub mod backends;
pub mod director;
pub mod grpo;
pub mod ledger;
pub mod metrics;
pub mod sim;
pub mod stream;
pub mod suite;
pub mod task;
pub mod trajectory;
