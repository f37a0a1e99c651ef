//! Few-shot modality integration through hypernetwork-generated LoRA
//! adapters for a shared projector between frozen encoders and a frozen
//! autoregressive decoder.

pub mod adapters;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod exec;
pub mod featsel;
pub mod hypernet;
pub mod numerics;
pub mod pipeline;
pub mod projector;
pub mod synth;

pub use error::{Result, SemiError};
pub use exec::Exec;
