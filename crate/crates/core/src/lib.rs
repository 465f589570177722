//! Replay-aware adversarial audio toolkit.
//!
//! Everything needed to study over-the-air replay attacks against speaker
//! verification in one place: a small reverse-mode autodiff engine, mel
//! spectrogram features, toy speaker embedders, a parametric replay channel,
//! a learned waveform-to-waveform replay simulator, sign-gradient attacks,
//! and the evaluation pipeline that ties them together.
//!
//! All numerics are generic over the scalar type via [`scalar::Scalar`];
//! `f32` is the working precision for the pipeline and `f64` backs the
//! oracles in tests.

pub mod asv;
pub mod attack;
pub mod audio;
pub mod channel;
pub mod ckpt;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod graph;
pub mod manifest;
pub mod nn;
pub mod nrs;
pub mod pipeline;
pub mod plot;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Working precision for the pipeline.
pub type F = f32;
