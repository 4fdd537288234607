//! Mono PCM16 WAV reading and writing.
//!
//! Integer samples map to floats as `v / 32768`, so `-32768` is exactly
//! `-1.0` and the largest positive value is `32767 / 32768`. Writing rounds
//! half away from zero and clamps to the 16-bit range.

use std::fs;
use std::path::Path;

use thiserror::Error;

const PCM_FORMAT: u16 = 1;
const PCM_SCALE: f64 = 32768.0;

#[derive(Debug, Error)]
pub enum WavError {
    #[error("malformed RIFF/WAVE header: {0}")]
    MalformedHeader(String),
    #[error("unsupported format code {0} (only PCM = 1 is accepted)")]
    UnsupportedFormat(u16),
    #[error("unsupported bit depth {0} (only 16-bit is accepted)")]
    UnsupportedBitDepth(u16),
    #[error("unsupported channel count {0} (only mono is accepted)")]
    UnsupportedChannels(u16),
    #[error("truncated data chunk: header declares {declared} bytes, {available} present")]
    TruncatedData { declared: usize, available: usize },
    #[error("sample {index} = {value} lies outside [-1, 1]")]
    SampleOutOfRange { index: usize, value: f64 },
    #[error("sample rate must be positive")]
    InvalidSampleRate,
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Mono waveform with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl AudioBuffer {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self, WavError> {
        if sample_rate_hz == 0 {
            return Err(WavError::InvalidSampleRate);
        }
        if let Some((index, &value)) = samples
            .iter()
            .enumerate()
            .find(|(_, s)| !(-1.0..=1.0).contains(*s))
        {
            return Err(WavError::SampleOutOfRange { index, value });
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    /// Builds a buffer from arbitrary samples, clamping them into `[-1, 1]`.
    /// NaN becomes 0.
    pub fn clamped(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self, WavError> {
        let samples = samples
            .into_iter()
            .map(|s| if s.is_nan() { 0.0 } else { s.clamp(-1.0, 1.0) })
            .collect();
        Self::new(samples, sample_rate_hz)
    }

    pub fn silence(len: usize, sample_rate_hz: u32) -> Result<Self, WavError> {
        Self::new(vec![0.0; len], sample_rate_hz)
    }

    pub fn from_pcm16(values: &[i16], sample_rate_hz: u32) -> Result<Self, WavError> {
        Self::new(
            values.iter().map(|&v| v as f64 / PCM_SCALE).collect(),
            sample_rate_hz,
        )
    }

    pub fn to_pcm16(&self) -> Vec<i16> {
        self.samples.iter().map(|&s| quantize_sample(s)).collect()
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_ms(&self) -> f64 {
        self.samples.len() as f64 * 1000.0 / self.sample_rate_hz as f64
    }

    /// Sub-range `[start, start + len)`, clipped to the buffer.
    pub fn slice(&self, start: usize, len: usize) -> AudioBuffer {
        let start = start.min(self.samples.len());
        let end = (start + len).min(self.samples.len());
        AudioBuffer {
            samples: self.samples[start..end].to_vec(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    pub fn truncated(mut self, len: usize) -> AudioBuffer {
        self.samples.truncate(len);
        self
    }
}

/// Round half away from zero of `s * 32768`, clamped to the i16 range.
pub fn quantize_sample(s: f64) -> i16 {
    (s * PCM_SCALE).round().clamp(-32768.0, 32767.0) as i16
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioBuffer, WavError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| WavError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_wav(&bytes)
}

pub fn write_wav(buf: &AudioBuffer, path: impl AsRef<Path>) -> Result<(), WavError> {
    let path = path.as_ref();
    fs::write(path, encode_wav(buf)).map_err(|source| WavError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn u16_at(bytes: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([bytes[at], bytes[at + 1]])
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

struct FmtChunk {
    channels: u16,
    sample_rate: u32,
}

/// Parses a RIFF/WAVE byte stream holding mono PCM16 audio.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioBuffer, WavError> {
    let pcm = decode_pcm16(bytes)?;
    AudioBuffer::from_pcm16(&pcm.1, pcm.0)
}

/// Returns `(sample_rate, samples)` without converting to floats.
pub fn decode_pcm16(bytes: &[u8]) -> Result<(u32, Vec<i16>), WavError> {
    if bytes.len() < 12 {
        return Err(WavError::MalformedHeader("file shorter than RIFF header".into()));
    }
    if &bytes[0..4] != b"RIFF" {
        return Err(WavError::MalformedHeader("missing RIFF magic".into()));
    }
    if &bytes[8..12] != b"WAVE" {
        return Err(WavError::MalformedHeader("missing WAVE form type".into()));
    }

    let mut fmt: Option<FmtChunk> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 || body + 16 > bytes.len() {
                    return Err(WavError::MalformedHeader("fmt chunk too short".into()));
                }
                let format = u16_at(bytes, body);
                let channels = u16_at(bytes, body + 2);
                let sample_rate = u32_at(bytes, body + 4);
                let bits = u16_at(bytes, body + 14);
                if format != PCM_FORMAT {
                    return Err(WavError::UnsupportedFormat(format));
                }
                if bits != 16 {
                    return Err(WavError::UnsupportedBitDepth(bits));
                }
                if channels != 1 {
                    return Err(WavError::UnsupportedChannels(channels));
                }
                if sample_rate == 0 {
                    return Err(WavError::InvalidSampleRate);
                }
                fmt = Some(FmtChunk {
                    channels,
                    sample_rate,
                });
            }
            b"data" => {
                let fmt = fmt.ok_or_else(|| {
                    WavError::MalformedHeader("data chunk precedes fmt chunk".into())
                })?;
                debug_assert_eq!(fmt.channels, 1);
                let available = bytes.len() - body;
                if size > available {
                    return Err(WavError::TruncatedData {
                        declared: size,
                        available,
                    });
                }
                if !size.is_multiple_of(2) {
                    return Err(WavError::MalformedHeader(
                        "data chunk size is not a whole number of samples".into(),
                    ));
                }
                let samples = bytes[body..body + size]
                    .chunks_exact(2)
                    .map(|b| i16::from_le_bytes([b[0], b[1]]))
                    .collect();
                return Ok((fmt.sample_rate, samples));
            }
            _ => {}
        }
        // Chunks are word aligned: odd sizes carry one pad byte.
        pos = body + size + (size & 1);
    }
    Err(WavError::MalformedHeader(
        if fmt.is_none() {
            "missing fmt chunk"
        } else {
            "missing data chunk"
        }
        .into(),
    ))
}

/// Canonical 44-byte header followed by little-endian PCM16 data.
pub fn encode_wav(buf: &AudioBuffer) -> Vec<u8> {
    encode_pcm16(&buf.to_pcm16(), buf.sample_rate_hz)
}

pub fn encode_pcm16(samples: &[i16], sample_rate: u32) -> Vec<u8> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&PCM_FORMAT.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for s in samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}
