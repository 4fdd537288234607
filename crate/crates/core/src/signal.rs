//! Deterministic synthetic signals for tests, benchmarks and demos.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tone(freq_hz: f64, sample_rate_hz: u32, len: usize, amplitude: f64) -> Vec<f64> {
    (0..len)
        .map(|n| amplitude * (2.0 * PI * freq_hz * n as f64 / sample_rate_hz as f64).sin())
        .collect()
}

/// Uniform white noise in `[-amplitude, amplitude]`.
pub fn noise(len: usize, amplitude: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| amplitude * (2.0 * rng.random::<f64>() - 1.0))
        .collect()
}

/// Two-pole resonator run in place.
fn resonate(x: &mut [f64], freq: f64, bandwidth: f64, rate: f64) {
    let r = (-PI * bandwidth / rate).exp();
    let theta = 2.0 * PI * freq / rate;
    let (a1, a2) = (2.0 * r * theta.cos(), -r * r);
    let gain = 1.0 - r;
    let (mut y1, mut y2) = (0.0, 0.0);
    for v in x.iter_mut() {
        let y = gain * *v + a1 * y1 + a2 * y2;
        y2 = y1;
        y1 = y;
        *v = y;
    }
}

/// Vowel-like voiced sound: a glottal pulse train with slight vibrato
/// through a cascade of formant resonators, normalised to `peak`.
///
/// Formants above 4 kHz are kept (when the rate allows) so that 24 kHz
/// renditions carry real high-band content.
pub fn vowel(sample_rate_hz: u32, len: usize, peak: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rate = sample_rate_hz as f64;
    let f0 = 110.0 + 40.0 * rng.random::<f64>();
    let vibrato_hz = 4.0 + 2.0 * rng.random::<f64>();
    let formants = [
        (600.0 + 200.0 * rng.random::<f64>(), 90.0),
        (1100.0 + 400.0 * rng.random::<f64>(), 110.0),
        (2400.0 + 300.0 * rng.random::<f64>(), 160.0),
        (3400.0 + 200.0 * rng.random::<f64>(), 200.0),
        (4700.0 + 300.0 * rng.random::<f64>(), 260.0),
        (6500.0 + 500.0 * rng.random::<f64>(), 320.0),
    ];

    let mut x = vec![0.0; len];
    let mut phase = 0.0;
    for (n, v) in x.iter_mut().enumerate() {
        let t = n as f64 / rate;
        let f = f0 * (1.0 + 0.02 * (2.0 * PI * vibrato_hz * t).sin());
        phase += f / rate;
        if phase >= 1.0 {
            phase -= 1.0;
            *v = 1.0;
        }
    }
    // Glottal roll-off: one leaky integration.
    let mut acc = 0.0;
    for v in x.iter_mut() {
        acc = 0.95 * acc + *v;
        *v = acc;
    }
    let dc = x.iter().sum::<f64>() / len.max(1) as f64;
    x.iter_mut().for_each(|v| *v -= dc);

    let mut out = vec![0.0; len];
    for (i, &(freq, bw)) in formants.iter().enumerate() {
        if freq >= 0.45 * rate {
            continue;
        }
        let mut band = x.clone();
        resonate(&mut band, freq, bw, rate);
        resonate(&mut band, freq, bw, rate);
        let weight = 1.0 / (1.0 + i as f64);
        for (o, b) in out.iter_mut().zip(&band) {
            *o += weight * b;
        }
    }

    // Smooth onset and release.
    let ramp = (0.02 * rate) as usize;
    for i in 0..ramp.min(len / 2) {
        let g = 0.5 * (1.0 - (PI * i as f64 / ramp as f64).cos());
        out[i] *= g;
        out[len - 1 - i] *= g;
    }

    let max = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max > 0.0 {
        out.iter_mut().for_each(|v| *v *= peak / max);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vowel_is_bounded_and_deterministic() {
        let a = vowel(24000, 8400, 0.3, 1);
        let b = vowel(24000, 8400, 0.3, 1);
        assert_eq!(a, b);
        let peak = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - 0.3).abs() < 1e-12);
        assert_ne!(a, vowel(24000, 8400, 0.3, 2));
    }
}
