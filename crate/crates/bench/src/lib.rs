//! Shared inputs for the benchmarks.

use bwe_core::audio_io::AudioBuffer;
use bwe_core::dsp::{DegradationSpec, LogMelConfig};
use bwe_core::signal::{noise, vowel};
use bwe_core::trainer::{crop_at, make_pair, TrainingExample};

/// Voiced signal with a little aspiration noise at 24 kHz.
pub fn speech(ms: usize, seed: u64) -> AudioBuffer {
    let n = ms * 24;
    let mut x = vowel(24000, n, 0.5, seed);
    for (v, e) in x.iter_mut().zip(noise(n, 0.03, seed + 1)) {
        *v += e;
    }
    AudioBuffer::new(x, 24000).expect("valid buffer")
}

/// One 350 ms training crop with desk-scale features.
pub fn desk_crop() -> TrainingExample {
    let pair = make_pair(&speech(1000, 1), &DegradationSpec::band_limit(8000), 350.0).expect("pair");
    crop_at(&pair, 0, 350.0, &LogMelConfig::default()).expect("crop")
}
