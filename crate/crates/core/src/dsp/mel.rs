use serde::{Deserialize, Serialize};

use super::stft::{stft_power, StftConfig};
use super::DspError;
use crate::audio_io::AudioBuffer;

/// HTK mel scale: `2595 log10(1 + f / 700)`.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale, row-major `[num_bins x (fft/2+1)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    pub num_bins: usize,
    pub num_fft_bins: usize,
    pub weights: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(
        num_bins: usize,
        fft_size: usize,
        sample_rate_hz: u32,
        fmin_hz: f64,
        fmax_hz: f64,
    ) -> Result<Self, DspError> {
        let nyquist = sample_rate_hz as f64 / 2.0;
        if !(fmin_hz >= 0.0 && fmin_hz < fmax_hz && fmax_hz <= nyquist) || num_bins == 0 {
            return Err(DspError::InvalidBand {
                fmin: fmin_hz,
                fmax: fmax_hz,
                nyquist,
            });
        }
        let num_fft_bins = fft_size / 2 + 1;
        let bin_hz = sample_rate_hz as f64 / fft_size as f64;
        let (mel_lo, mel_hi) = (hz_to_mel(fmin_hz), hz_to_mel(fmax_hz));
        let edges: Vec<f64> = (0..num_bins + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (num_bins + 1) as f64))
            .collect();

        for i in 0..num_bins.saturating_sub(1) {
            let a = (edges[i + 1] / bin_hz).round() as usize;
            let b = (edges[i + 2] / bin_hz).round() as usize;
            if a == b {
                return Err(DspError::DegenerateFilterbank {
                    lower: i,
                    upper: i + 1,
                    bin: a,
                });
            }
        }

        let mut weights = vec![0.0; num_bins * num_fft_bins];
        for m in 0..num_bins {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let row = &mut weights[m * num_fft_bins..(m + 1) * num_fft_bins];
            for (k, w) in row.iter_mut().enumerate() {
                let f = k as f64 * bin_hz;
                *w = if f > lo && f <= center {
                    (f - lo) / (center - lo)
                } else if f > center && f < hi {
                    (hi - f) / (hi - center)
                } else {
                    0.0
                };
            }
            if row.iter().all(|&w| w == 0.0) {
                let bin = (center / bin_hz).round() as usize;
                return Err(DspError::DegenerateFilterbank {
                    lower: m.saturating_sub(1),
                    upper: m,
                    bin,
                });
            }
        }

        Ok(Self {
            num_bins,
            num_fft_bins,
            weights,
        })
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.num_fft_bins..(m + 1) * self.num_fft_bins]
    }

    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            *o = self.row(m).iter().zip(power).map(|(w, p)| w * p).sum();
        }
    }
}

/// Log-mel extraction settings. Defaults are the 8 kHz conditioning front end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogMelConfig {
    pub sample_rate_hz: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub fft_size: usize,
    pub num_bins: usize,
    pub fmin_hz: f64,
    /// `None` means the Nyquist frequency of `sample_rate_hz`.
    pub fmax_hz: Option<f64>,
    pub energy_floor: f64,
}

impl Default for LogMelConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 8000,
            window_ms: 50.0,
            hop_ms: 12.5,
            fft_size: 512,
            num_bins: 80,
            fmin_hz: 125.0,
            fmax_hz: None,
            energy_floor: 1e-10,
        }
    }
}

impl LogMelConfig {
    pub fn fmax(&self) -> f64 {
        self.fmax_hz.unwrap_or(self.sample_rate_hz as f64 / 2.0)
    }

    pub fn stft(&self) -> Result<StftConfig, DspError> {
        StftConfig::from_ms(self.sample_rate_hz, self.window_ms, self.hop_ms, self.fft_size)
    }

    pub fn frame_rate_hz(&self) -> f64 {
        1000.0 / self.hop_ms
    }

    pub fn filterbank(&self) -> Result<MelFilterbank, DspError> {
        MelFilterbank::new(
            self.num_bins,
            self.fft_size,
            self.sample_rate_hz,
            self.fmin_hz,
            self.fmax(),
        )
    }
}

/// `[num_frames x num_bins]` natural-log mel energies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelSpectrogram {
    pub num_frames: usize,
    pub num_bins: usize,
    pub frames: Vec<f64>,
    pub frame_rate_hz: f64,
    pub fmin_hz: f64,
    pub fmax_hz: f64,
    pub source_sample_rate_hz: u32,
}

impl MelSpectrogram {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.frames[t * self.num_bins..(t + 1) * self.num_bins]
    }

    /// Constant spectrogram; handy for tests and silence.
    pub fn filled(num_frames: usize, num_bins: usize, value: f64, frame_rate_hz: f64) -> Self {
        Self {
            num_frames,
            num_bins,
            frames: vec![value; num_frames * num_bins],
            frame_rate_hz,
            fmin_hz: 0.0,
            fmax_hz: 1.0,
            source_sample_rate_hz: 8000,
        }
    }
}

/// `ln(max(filterbank . power, floor))` per frame.
pub fn log_mel(buf: &AudioBuffer, config: &LogMelConfig) -> Result<MelSpectrogram, DspError> {
    if buf.sample_rate_hz() != config.sample_rate_hz {
        return Err(DspError::RateMismatch {
            expected: config.sample_rate_hz,
            actual: buf.sample_rate_hz(),
        });
    }
    let stft = config.stft()?;
    let bank = config.filterbank()?;
    let power = stft_power(buf.samples(), &stft)?;
    let floor_log = config.energy_floor.ln();
    let mut frames = vec![0.0; power.num_frames * bank.num_bins];
    for t in 0..power.num_frames {
        let row = &mut frames[t * bank.num_bins..(t + 1) * bank.num_bins];
        bank.apply(power.frame(t), row);
        for v in row.iter_mut() {
            *v = if *v > config.energy_floor {
                v.ln()
            } else {
                floor_log
            };
        }
    }
    Ok(MelSpectrogram {
        num_frames: power.num_frames,
        num_bins: bank.num_bins,
        frames,
        frame_rate_hz: config.sample_rate_hz as f64 / stft.hop as f64,
        fmin_hz: config.fmin_hz,
        fmax_hz: config.fmax(),
        source_sample_rate_hz: config.sample_rate_hz,
    })
}
