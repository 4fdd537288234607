use std::f64::consts::PI;

use super::DspError;
use crate::audio_io::AudioBuffer;

/// Passband edge as a fraction of the lower Nyquist frequency.
pub const PASSBAND_FRACTION: f64 = 0.9;
/// Design stopband attenuation in dB (applies from the lower Nyquist up).
pub const STOPBAND_ATTENUATION_DB: f64 = 70.0;
const MAX_PHASES: u32 = 4096;

/// Rational polyphase resampler built on a Kaiser-windowed sinc prototype.
///
/// The prototype runs at `up * source_rate`. Its transition band spans
/// `[0.9, 1.0]` of the lower Nyquist frequency, the cutoff sits in the
/// middle, and the length comes from the Kaiser design formula for
/// [`STOPBAND_ATTENUATION_DB`].
#[derive(Debug, Clone)]
pub struct Resampler {
    source_rate: u32,
    target_rate: u32,
    up: usize,
    down: usize,
    taps: Vec<f64>,
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..200 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

impl Resampler {
    pub fn new(source_rate: u32, target_rate: u32) -> Result<Self, DspError> {
        if source_rate == 0 || target_rate == 0 {
            return Err(DspError::InvalidRate {
                source_hz: source_rate,
                target_hz: target_rate,
            });
        }
        let g = gcd(source_rate, target_rate);
        let up = target_rate / g;
        let down = source_rate / g;
        if up > MAX_PHASES || down > MAX_PHASES {
            return Err(DspError::UnsupportedRatio { up, down });
        }

        let proto_rate = source_rate as f64 * up as f64;
        let nyquist = source_rate.min(target_rate) as f64 / 2.0;
        let transition_hz = (1.0 - PASSBAND_FRACTION) * nyquist;
        let cutoff_hz = (1.0 + PASSBAND_FRACTION) / 2.0 * nyquist;

        let atten = STOPBAND_ATTENUATION_DB;
        let beta = if atten > 50.0 {
            0.1102 * (atten - 8.7)
        } else {
            0.5842 * (atten - 21.0).powf(0.4) + 0.07886 * (atten - 21.0)
        };
        let delta_omega = 2.0 * PI * transition_hz / proto_rate;
        let mut len = ((atten - 8.0) / (2.285 * delta_omega)).ceil() as usize + 1;
        if len.is_multiple_of(2) {
            len += 1;
        }

        let center = (len - 1) as f64 / 2.0;
        let fc = cutoff_hz / proto_rate;
        let i0_beta = bessel_i0(beta);
        let taps = (0..len)
            .map(|n| {
                let r = (n as f64 - center) / center;
                let w = bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / i0_beta;
                2.0 * fc * sinc(2.0 * fc * (n as f64 - center)) * w * up as f64
            })
            .collect();

        Ok(Self {
            source_rate,
            target_rate,
            up: up as usize,
            down: down as usize,
            taps,
        })
    }

    pub fn source_rate(&self) -> u32 {
        self.source_rate
    }

    pub fn target_rate(&self) -> u32 {
        self.target_rate
    }

    /// Prototype filter length (at the upsampled rate).
    pub fn filter_len(&self) -> usize {
        self.taps.len()
    }

    pub fn taps_per_phase(&self) -> usize {
        self.taps.len().div_ceil(self.up)
    }

    pub fn output_len(&self, input_len: usize) -> usize {
        ((input_len as u128 * self.up as u128 * 2 + self.down as u128) / (2 * self.down as u128))
            as usize
    }

    /// Magnitude response of the overall conversion (prototype gain divided
    /// by the interpolation factor) at `freq_hz`.
    pub fn gain_at(&self, freq_hz: f64) -> f64 {
        let proto_rate = self.source_rate as f64 * self.up as f64;
        let w = 2.0 * PI * freq_hz / proto_rate;
        let center = (self.taps.len() - 1) as f64 / 2.0;
        let (mut re, mut im) = (0.0, 0.0);
        for (n, &h) in self.taps.iter().enumerate() {
            let phase = w * (n as f64 - center);
            re += h * phase.cos();
            im += h * phase.sin();
        }
        (re * re + im * im).sqrt() / self.up as f64
    }

    pub fn process(&self, input: &[f64]) -> Vec<f64> {
        let out_len = self.output_len(input.len());
        let n_taps = self.taps.len() as i64;
        let center = (n_taps - 1) / 2;
        let up = self.up as i64;
        let len = input.len() as i64;
        (0..out_len as i64)
            .map(|n| {
                // Output n sits at position n*down on the upsampled grid; input j
                // sits at j*up and meets tap index n*down + center - j*up.
                let pos = n * self.down as i64 + center;
                let j_hi = (pos / up).min(len - 1);
                let j_lo = (pos - n_taps + 1 + up - 1).div_euclid(up).max(0);
                let mut acc = 0.0;
                let mut j = j_lo;
                while j <= j_hi {
                    acc += input[j as usize] * self.taps[(pos - j * up) as usize];
                    j += 1;
                }
                acc
            })
            .collect()
    }
}

/// Resamples raw samples; the output is not clamped.
pub fn resample_samples(
    samples: &[f64],
    source_rate: u32,
    target_rate: u32,
) -> Result<Vec<f64>, DspError> {
    if source_rate == target_rate && source_rate > 0 {
        return Ok(samples.to_vec());
    }
    Ok(Resampler::new(source_rate, target_rate)?.process(samples))
}

/// Resamples a buffer, clamping filter overshoot back into `[-1, 1]`.
pub fn resample(buf: &AudioBuffer, target_rate_hz: u32) -> Result<AudioBuffer, DspError> {
    let out = resample_samples(buf.samples(), buf.sample_rate_hz(), target_rate_hz)?;
    Ok(AudioBuffer::clamped(out, target_rate_hz)?)
}
