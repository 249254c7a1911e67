//! Desk-scale laboratory for studying the robustness of machine unlearning
//! in small transformer language models.
//!
//! The crate is organized around a single experiment loop:
//!
//! 1. [`corpus`] generates a deterministic synthetic fact corpus with
//!    forget/retain/test/utility splits plus a benign instruction-like corpus.
//! 2. [`model`] defines a small decoder-only transformer (trained with
//!    [`model::pretrain`]) whose per-layer module outputs are addressable as
//!    named activation sites.
//! 3. [`unlearn`] implements six unlearning objectives (GA, GD, DPO, NPO,
//!    RMU, SSIUU) on top of the reverse-mode [`tensor`] engine, with
//!    forget-score early stopping.
//! 4. [`attribution`] computes input-times-gradient neuron attributions and
//!    the positive/negative influence-variation statistics between model
//!    snapshots.
//! 5. [`attack`] retrains unlearned models (harmful fraction-p and benign
//!    scenarios) and reports the maximum recovered forget score.
//! 6. [`metrics`] scores snapshots (FS/RS/US) and probes layers with a
//!    logit lens.
//! 7. [`pipeline`] wires the stages into a resumable, config-driven run
//!    directory with plot-ready exports.

pub mod attack;
pub mod attribution;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod seed;
pub mod tensor;
pub mod unlearn;

pub use error::{Error, Result};
