use std::f64::consts::PI;

use rustfft::{num_complex::Complex, FftPlanner};

use super::DspError;

/// Periodic Hann window: `w[n] = 0.5 (1 - cos(2 pi n / N))`.
pub fn hann_window(length: usize) -> Result<Vec<f64>, DspError> {
    if length < 2 {
        return Err(DspError::WindowTooShort(length));
    }
    let n = length as f64;
    Ok((0..length)
        .map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / n).cos()))
        .collect())
}

/// Frame layout in samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
    pub fft_size: usize,
}

impl StftConfig {
    pub fn new(window_len: usize, hop: usize, fft_size: usize) -> Result<Self, DspError> {
        if window_len < 2 {
            return Err(DspError::WindowTooShort(window_len));
        }
        if hop == 0 {
            return Err(DspError::InvalidHop);
        }
        if window_len > fft_size {
            return Err(DspError::WindowLongerThanFft {
                window: window_len,
                fft_size,
            });
        }
        Ok(Self {
            window_len,
            hop,
            fft_size,
        })
    }

    /// Converts millisecond window/hop lengths at `sample_rate` to samples.
    pub fn from_ms(
        sample_rate: u32,
        window_ms: f64,
        hop_ms: f64,
        fft_size: usize,
    ) -> Result<Self, DspError> {
        let window = (window_ms * sample_rate as f64 / 1000.0).round() as usize;
        let hop = (hop_ms * sample_rate as f64 / 1000.0).round() as usize;
        Self::new(window, hop, fft_size)
    }

    /// Same as [`from_ms`](Self::from_ms) with the FFT size set to the next
    /// power of two at or above the window length.
    pub fn from_ms_auto_fft(sample_rate: u32, window_ms: f64, hop_ms: f64) -> Result<Self, DspError> {
        let window = (window_ms * sample_rate as f64 / 1000.0).round() as usize;
        Self::from_ms(sample_rate, window_ms, hop_ms, window.max(2).next_power_of_two())
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// `ceil(len / hop)`; the last window is zero padded.
    pub fn num_frames(&self, len: usize) -> usize {
        len.div_ceil(self.hop)
    }
}

/// Row-major `[frames x bins]` matrix of squared DFT magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSpectrogram {
    pub num_frames: usize,
    pub num_bins: usize,
    pub data: Vec<f64>,
}

impl PowerSpectrogram {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.num_bins..(t + 1) * self.num_bins]
    }

    pub fn get(&self, t: usize, k: usize) -> f64 {
        self.data[t * self.num_bins + k]
    }
}

/// Hann-windowed power spectrogram. Frame `t` covers samples
/// `[t * hop, t * hop + window_len)`, reading zeros past the end.
pub fn stft_power(samples: &[f64], cfg: &StftConfig) -> Result<PowerSpectrogram, DspError> {
    let cfg = StftConfig::new(cfg.window_len, cfg.hop, cfg.fft_size)?;
    let window = hann_window(cfg.window_len)?;
    let num_frames = cfg.num_frames(samples.len());
    let num_bins = cfg.num_bins();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_size);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut data = Vec::with_capacity(num_frames * num_bins);

    for t in 0..num_frames {
        let start = t * cfg.hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            let v = if i < cfg.window_len {
                samples.get(start + i).copied().unwrap_or(0.0) * window[i]
            } else {
                0.0
            };
            *slot = Complex::new(v, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        data.extend(buf[..num_bins].iter().map(|c| c.norm_sqr()));
    }

    Ok(PowerSpectrogram {
        num_frames,
        num_bins,
        data,
    })
}
