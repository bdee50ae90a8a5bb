//! Discriminator-guided Verilog generation at desk scale.
//!
//! The crate covers the whole pipeline: mining Verilog modules from source
//! trees ([`corpus`]), a byte-level BPE [`tokenizer`], a small reverse-mode
//! [`autodiff`] engine, a tiny decoder-only transformer ([`model`]) used both
//! as generator and as class-conditional discriminator, the generative and
//! discriminative training objectives ([`training`]), Bayes-rule guided
//! decoding with token filtering ([`guidance`]), synthetic data
//! [`augment`]ation, tool-backed [`labelers`], and pass@k [`eval`]uation.

pub mod augment;
pub mod autodiff;
pub mod corpus;
pub mod eval;
pub mod guidance;
pub mod labelers;
pub mod model;
pub mod sampling;
pub mod tokenizer;
pub mod training;
pub mod verilog;
pub use model::{ControlCode, ControlledSequence, ModelConfig, ModelParameters};
pub use tokenizer::Vocab;
