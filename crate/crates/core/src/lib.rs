//! Parallel speech-encoder fusion for a toy speech-LLM: a small reverse-mode
//! autodiff core, the fusion mechanisms and projectors, synthetic two-view
//! data, staged training and WER/CER scoring.

pub mod attention;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fusion;
pub mod gradcheck;
pub mod layers;
pub mod lora;
pub mod losses;
pub mod model;
pub mod params;
pub mod projector;
pub mod repetition;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
