//! Configurable safety tuning (CST) on a desk-scale language model.
//!
//! The crate implements the full loop in plain Rust with `f64` math:
//!
//! 1. [`critique`] — synthesize preference pairs by self-critique: draft an
//!    answer under a permissive system prompt, critique it, and revise it
//!    under a restrictive system prompt. Ships a deterministic toy generator
//!    and an HTTP client for a remote one.
//! 2. [`data`] — turn each preference pair into *two* training tuples with
//!    opposed system prompts, so the tuned model keeps both behaviors and the
//!    system prompt selects between them at inference time. The plain-DPO
//!    view (one tuple per pair, restrictive prompt only) exists as a baseline.
//! 3. [`model`] / [`dpo`] / [`train`] — a tiny windowed language model with
//!    exact log-probabilities and gradients, the DPO objective against a
//!    frozen reference snapshot, and a seeded SGD/Adam training loop.
//! 4. [`eval`] — greedy generations scored per behavior label by a rule
//!    judge (or a remote one), rendered as markdown/CSV report tables.
//!
//! Everything downstream of a seed is bit-reproducible: shuffles, splits and
//! parameter draws all run on the documented [`rng::Lcg64`] generator, and
//! reductions accumulate in fixed sequential order.

pub mod critique;
pub mod data;
pub mod dpo;
pub mod eval;
pub mod http;
pub mod model;
pub mod rng;
pub mod train;
