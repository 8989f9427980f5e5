//! Open-vocabulary keyword spotting from phone sequences.
//!
//! A small recurrent acoustic model is pretrained with CTC; a keyword
//! encoder then maps any phone sequence to the weights of a per-keyword
//! detection filter that runs on top of the frozen acoustic stack. The
//! crate covers the full loop: synthetic data generation, CTC pretraining,
//! forced alignment, joint detector training, model compilation with 8-bit
//! quantization, streaming detection, residual fine-tuning, and evaluation.

pub mod acoustic;
pub mod ctc;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod io;
pub mod keyword;
pub mod nn;
pub mod pipeline;
pub mod quant;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
