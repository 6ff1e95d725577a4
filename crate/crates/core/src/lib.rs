//! Epinet-augmented contrastive decoding at desk scale.
//!
//! The pipeline: a small trainable decoder-only transformer with
//! per-layer taps ([`lm`]), DoLa dynamic-premature-layer contrastive
//! decoding ([`dola`]), a trainable epistemic neural network over the
//! frozen LM's features ([`epinet`]), training-pair generation and the
//! feature cache ([`data`]), and a multiple-choice factuality harness
//! ([`eval`]).

pub mod data;
pub mod dola;
pub mod epinet;
pub mod error;
pub mod eval;
pub mod io;
pub mod lm;
pub mod math;

pub use error::{Error, Result};
