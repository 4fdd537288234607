#![allow(dead_code)]

pub mod ops;

use bwe_core::dsp::MelSpectrogram;
use bwe_core::tensor::{Graph, ShadowParams};
use bwe_core::wavenet::{WaveNet, WaveNetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_mel(frames: usize, bins: usize, seed: u64) -> MelSpectrogram {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mel = MelSpectrogram::filled(frames, bins, 0.0, 80.0);
    for v in &mut mel.frames {
        *v = -4.0 + 3.0 * rng.random::<f64>();
    }
    mel
}

pub fn random_audio(len: usize, amp: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| amp * (2.0 * rng.random::<f64>() - 1.0)).collect()
}

pub fn forward_f64(model: &WaveNet, p: &ShadowParams<f64>, audio: &[f64], mel: &MelSpectrogram) -> Vec<f64> {
    let mut g = Graph::<f64>::new();
    let out = model.build_forward(&mut g, p, audio, mel).unwrap();
    g.value(out).data().to_vec()
}

/// Output rows whose values differ between two forward results.
pub fn changed_rows(a: &[f64], b: &[f64], width: usize) -> Vec<usize> {
    a.chunks(width)
        .zip(b.chunks(width))
        .enumerate()
        .filter(|(_, (x, y))| x != y)
        .map(|(t, _)| t)
        .collect()
}

/// Parameters that make the network a positive linear system on a zero
/// baseline: every weight positive, biases zero, filter taps 2 so that the
/// gated unit (gain 1/2 at the origin) passes signals at unit gain.
pub fn probe_params(model: &WaveNet) -> ShadowParams<f64> {
    let mut p = model.params().shadow::<f64>();
    for id in model.params().ids() {
        let name = model.params().get(id).name.clone();
        let v = if name.ends_with(".b") {
            0.0
        } else if name.contains(".filter.") || name.contains(".gate.") {
            2.0
        } else {
            1.0
        };
        p.value_mut(id).data_mut().fill(v);
    }
    p
}

/// Impulse-response support of the autoregressive path: the number of
/// output steps that change when one input sample is perturbed.
pub fn measured_receptive_field(config: WaveNetConfig, probe: bool, seed: u64) -> usize {
    let rf = config.receptive_field();
    let frames = (rf + 64).div_ceil(config.samples_per_frame()) + 1;
    let len = frames * config.samples_per_frame();
    let model = WaveNet::new(WaveNetConfig {
        init_seed: seed,
        ..config
    })
    .unwrap();
    let width = model.config().params_per_step();
    let t0 = 16;
    // Random weights can hide a dependency behind an inactive relu at some
    // step, so the random-weight measurement takes the union over several
    // backgrounds.
    let trials = if probe { 1 } else { 4 };
    let mut rows: Vec<usize> = Vec::new();
    for trial in 0..trials {
        let (params, base, mel) = if probe {
            (
                probe_params(&model),
                vec![0.0; len],
                MelSpectrogram::filled(frames, model.config().mel_bins, 0.0, 80.0),
            )
        } else {
            let s = seed * 31 + trial;
            (
                model.params().shadow::<f64>(),
                random_audio(len, 0.5, s),
                random_mel(frames, model.config().mel_bins, s),
            )
        };
        let mut poked = base.clone();
        poked[t0] += if probe { 1e-30 } else { 0.25 };
        let a = forward_f64(&model, &params, &base, &mel);
        let b = forward_f64(&model, &params, &poked, &mel);
        rows.extend(changed_rows(&a, &b, width));
    }
    rows.sort_unstable();
    rows.dedup();
    assert!(rows.iter().all(|&t| t > t0), "output before the perturbation moved");
    match (rows.first(), rows.last()) {
        (Some(&lo), Some(&hi)) => {
            assert!(lo > t0);
            if probe {
                assert_eq!(lo, t0 + 1);
                assert_eq!(rows.len(), hi - lo + 1, "support has holes");
            }
            hi - t0
        }
        _ => 0,
    }
}
