//! Speech bandwidth extension from 8 kHz to 24 kHz with a conditional WaveNet.
//!
//! The crate covers the whole pipeline: PCM16 WAV I/O, band-limiting and
//! log-mel feature extraction, a small reverse-mode tensor library, the
//! WaveNet model with a discretized logistic mixture output, training,
//! cached autoregressive sampling, objective metrics and the bookkeeping
//! side of a MUSHRA listening test.

pub mod audio_io;
pub mod config;
pub mod dsp;
pub mod evalkit;
pub mod mushra;
pub mod sampler;
pub mod signal;
pub mod tensor;
pub mod trainer;
pub mod wavenet;

pub use audio_io::{read_wav, write_wav, AudioBuffer, WavError};
pub use config::PipelineConfig;
pub use dsp::{DegradationMode, DegradationSpec, LogMelConfig, MelSpectrogram};
pub use tensor::{AdamConfig, Graph, NodeId, ParamStore, Tensor};
pub use wavenet::{MixtureParams, WaveNet, WaveNetConfig};
