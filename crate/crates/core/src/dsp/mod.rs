//! Front half of the pipeline: rate conversion, degradation, STFT and
//! log-mel features.

mod degrade;
mod mel;
mod resample;
mod stft;

pub use degrade::{degrade, DegradationMode, DegradationSpec, CODEC_FRAME_MS};
pub use mel::{hz_to_mel, log_mel, mel_to_hz, LogMelConfig, MelFilterbank, MelSpectrogram};
pub use resample::{resample, resample_samples, Resampler};
pub use stft::{hann_window, stft_power, PowerSpectrogram, StftConfig};

use thiserror::Error;

use crate::audio_io::WavError;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("sample rates must be positive (got {source_hz} -> {target_hz})")]
    InvalidRate { source_hz: u32, target_hz: u32 },
    #[error("rate ratio {up}/{down} is too fine-grained for the polyphase resampler")]
    UnsupportedRatio { up: u32, down: u32 },
    #[error("window length must be at least 2 (got {0})")]
    WindowTooShort(usize),
    #[error("window of {window} samples does not fit fft size {fft_size}")]
    WindowLongerThanFft { window: usize, fft_size: usize },
    #[error("hop must be at least one sample")]
    InvalidHop,
    #[error("invalid band edges: need 0 <= fmin ({fmin}) < fmax ({fmax}) <= nyquist ({nyquist})")]
    InvalidBand { fmin: f64, fmax: f64, nyquist: f64 },
    #[error("mel filters {lower} and {upper} are centred on the same FFT bin {bin}; use fewer bins or a larger FFT")]
    DegenerateFilterbank { lower: usize, upper: usize, bin: usize },
    #[error("audio at {actual} Hz does not match the configured {expected} Hz")]
    RateMismatch { expected: u32, actual: u32 },
    #[error("degradation target {target} Hz must be below the source rate {source_hz} Hz")]
    TargetNotBelowSource { target: u32, source_hz: u32 },
    #[error("external codec mode requires a command template")]
    MissingCodecCommand,
    #[error("external codec failed ({status}): {diagnostics}")]
    CodecFailed { status: String, diagnostics: String },
    #[error("external codec output unreadable: {0}")]
    CodecOutput(#[source] WavError),
    #[error("external codec produced {actual} Hz audio, expected {expected} Hz")]
    CodecRate { expected: u32, actual: u32 },
    #[error("external codec produced {actual} samples, expected {expected} within one frame")]
    CodecLength { expected: usize, actual: usize },
    #[error("temporary file handling failed: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Wav(#[from] WavError),
}
