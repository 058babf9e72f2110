//! Decoupled audio-to-phoneme / phoneme-to-text transformer for
//! code-switching speech recognition, with everything it needs built in:
//! a small reverse-mode autodiff engine, transformer blocks, CTC training and
//! prefix beam search, a synthetic bilingual corpus, the staged training
//! pipeline, and mixed-error-rate scoring.

pub mod autodiff;
pub mod ctc;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
