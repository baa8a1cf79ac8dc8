//! Continual-pretraining toolkit for dialect-robust BERT-style encoders.
//!
//! The pipeline runs corpus cleaning ([`corpus`]), near-duplicate removal
//! ([`dedup`]), WordPiece training ([`tokenizer`]), MLM/TLM example
//! construction ([`batching`]), a from-scratch encoder with analytic
//! gradients ([`model`]), staged pretraining and fine-tuning ([`training`]),
//! and the benchmark metrics and task registry ([`eval`]).

pub mod batching;
pub mod corpus;
pub mod dedup;
pub mod error;
pub mod eval;
pub mod model;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
