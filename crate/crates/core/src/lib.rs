//! Speaker verification toolkit built around per-frequency-bin early
//! attention: spectrogram front-end, a small reverse-mode autograd core,
//! VGG/ResNet/SE-ResNet backbones, EER scoring, a synthetic speaker corpus
//! and an experiment harness.

pub mod attention;
pub mod audio;
pub mod backbone;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
