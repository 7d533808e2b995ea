//! Joint age-invariant face recognition (AIFR) and face age synthesis (FAS).
//!
//! The crate is organized around a small reverse-mode autodiff engine
//! ([`tensor`]) on top of which the model, losses, and training loop are
//! built:
//!
//! - [`model`] — encoder, attention-based feature decomposition, age and
//!   identity heads, gradient reversal, identity-conditional synthesis with
//!   weight-shared filter banks, style-conditioned decoder, and the
//!   conditional patch discriminator.
//! - [`losses`] — every loss term of both tasks as pure functions of model
//!   outputs and labels.
//! - [`train`] — the alternating three-step optimization, learning-rate
//!   scheduling, metrics logging, and checkpointing.
//! - [`ftsel`] — selective fine-tuning: child-face synthesis, quality
//!   scoring, two-component GMM selection, last-layer fine-tuning.
//! - [`eval`] — verification, identification, and synthesis metrics, plus
//!   the seven-interval age-group partition.
//! - [`data`] — dataset manifests, preprocessing, and a procedural toy face
//!   generator for desk-scale runs.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod ftsel;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub mod cli;

pub use config::{ArchConfig, Preset};
pub use error::{Error, Result};
