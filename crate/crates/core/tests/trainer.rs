mod common;

use std::fs;

use bwe_core::audio_io::{write_wav, AudioBuffer};
use bwe_core::dsp::{resample, DegradationSpec, LogMelConfig, MelSpectrogram};
use bwe_core::evalkit::energy_above_db;
use bwe_core::signal::{noise, vowel};
use bwe_core::trainer::*;
use bwe_core::wavenet::{load_checkpoint, WaveNet, WaveNetConfig};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn utterance(ms: usize, seed: u64) -> AudioBuffer {
    AudioBuffer::new(vowel(24000, ms * 24, 0.6, seed), 24000).unwrap()
}

fn pair(ms: usize, seed: u64) -> TrainingPair {
    make_pair(&utterance(ms, seed), &DegradationSpec::band_limit(8000), 350.0).unwrap()
}

/// Random crops for the tiny config (640 Hz, 3 mel bins, 8 samples per frame).
struct TinySource;

impl CropSource for TinySource {
    fn sample(&self, rng: &mut ChaCha8Rng) -> Result<TrainingExample, TrainError> {
        let seed = rng.random::<u64>();
        Ok(tiny_example(seed))
    }
}

fn tiny_example(seed: u64) -> TrainingExample {
    let frames = 3;
    TrainingExample {
        target: AudioBuffer::new(random_audio(frames * 8, 0.5, seed), 640).unwrap(),
        cond_audio: AudioBuffer::silence(0, 8000).unwrap(),
        mel: random_mel(frames, 3, seed),
        offset: 0,
    }
}

fn run_cfg(steps: u64, lr: f64) -> TrainRunConfig {
    let mut cfg = TrainRunConfig {
        batch_size: 2,
        steps,
        seed: 5,
        checkpoint_every: 0,
        ..TrainRunConfig::default()
    };
    cfg.adam.learning_rate = lr;
    cfg
}

#[test]
fn three_second_utterance_pairs_at_three_to_one() {
    let p = pair(3000, 1);
    assert_eq!(p.hi.len(), 72000);
    assert_eq!(p.lo.len(), 24000);
    assert_eq!(p.lo.sample_rate_hz(), 8000);
    assert_eq!(p.ratio(), 3);
}

#[test]
fn band_limited_pair_has_no_high_band() {
    // Voiced signal plus aspiration noise, so the reference has a real high band.
    let mut x = vowel(24000, 24000, 0.5, 2);
    for (v, n) in x.iter_mut().zip(noise(24000, 0.05, 2)) {
        *v += n;
    }
    let hi = AudioBuffer::new(x, 24000).unwrap();
    let p = make_pair(&hi, &DegradationSpec::band_limit(8000), 350.0).unwrap();
    let up = resample(&p.lo, 24000).unwrap();
    assert!(energy_above_db(&up, 4200.0).unwrap() <= -50.0);
    assert!(energy_above_db(&p.hi, 4200.0).unwrap() > -30.0);
}

#[test]
fn short_utterances_are_rejected() {
    let err = make_pair(&utterance(300, 1), &DegradationSpec::band_limit(8000), 350.0).unwrap_err();
    assert!(matches!(err, TrainError::TooShort { .. }));
}

#[test]
fn crops_have_aligned_sizes_and_repeat_under_a_seed() {
    let p = pair(2000, 3);
    let mel = LogMelConfig::default();
    for seed in 0..10 {
        let a = sample_crop(&p, &mut ChaCha8Rng::seed_from_u64(seed), 350.0, &mel).unwrap();
        let b = sample_crop(&p, &mut ChaCha8Rng::seed_from_u64(seed), 350.0, &mel).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.target.len(), 8400);
        assert_eq!(a.cond_audio.len(), 2800);
        assert_eq!((a.mel.num_frames, a.mel.num_bins), (28, 80));
        assert_eq!(a.offset % 100, 0);
        assert_eq!(a.target.samples(), &p.hi.samples()[a.offset * 3..a.offset * 3 + 8400]);
    }
    let offsets: std::collections::HashSet<usize> = (0..50)
        .map(|s| {
            sample_crop(&p, &mut ChaCha8Rng::seed_from_u64(s), 350.0, &mel)
                .unwrap()
                .offset
        })
        .collect();
    assert!(offsets.len() > 5);
}

#[test]
fn silent_crop_sits_at_the_floor() {
    let silent = AudioBuffer::silence(24000, 24000).unwrap();
    let p = make_pair(&silent, &DegradationSpec::band_limit(8000), 350.0).unwrap();
    let ex = sample_crop(&p, &mut ChaCha8Rng::seed_from_u64(0), 350.0, &LogMelConfig::default()).unwrap();
    assert!(ex.target.samples().iter().all(|&x| x == 0.0));
    let floor = 1e-10f64.ln();
    assert!(ex.mel.frames.iter().all(|&v| v == floor));
}

#[test]
fn fresh_desk_loss_on_a_crop_is_bounded() {
    let p = pair(1000, 4);
    let ex = crop_at(&p, 0, 350.0, &LogMelConfig::default()).unwrap();
    let model = WaveNet::new(WaveNetConfig::desk()).unwrap();
    let loss = model.nll_loss(ex.target.samples(), &ex.mel).unwrap();
    assert!(loss.is_finite() && loss <= 11.1, "{loss}");
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let mut model = WaveNet::new(WaveNetConfig::tiny()).unwrap();
    let before = model.params().clone();
    train(&mut model, &TinySource, &run_cfg(5, 0.0), 0, None, |_| {}).unwrap();
    for (a, b) in before.iter().zip(model.params().iter()) {
        let same = a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        assert!(same, "{} moved", a.name);
    }
}

#[test]
fn equal_seeds_give_equal_loss_curves() {
    let curve = || {
        let mut model = WaveNet::new(WaveNetConfig::tiny()).unwrap();
        train(&mut model, &TinySource, &run_cfg(6, 1e-3), 0, None, |_| {})
            .unwrap()
            .records
            .iter()
            .map(|r| r.loss_nats.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(curve(), curve());
}

#[test]
fn batch_loss_is_the_mean_of_example_losses() {
    let mut model = WaveNet::new(WaveNetConfig::tiny()).unwrap();
    let batch: Vec<_> = (0..4).map(tiny_example).collect();
    let each: Vec<f64> = batch
        .iter()
        .map(|ex| model.nll_loss(ex.target.samples(), &ex.mel).unwrap())
        .collect();
    let mean = batch_loss(&mut model, &batch).unwrap();
    assert!((mean - each.iter().sum::<f64>() / 4.0).abs() < 1e-6);

    // The accumulated gradient is the mean of the per-example gradients.
    let grads: Vec<Vec<f32>> = batch
        .iter()
        .map(|ex| {
            let mut m = model.clone();
            batch_loss(&mut m, std::slice::from_ref(ex)).unwrap();
            m.params().iter().flat_map(|p| p.grad.data().to_vec()).collect()
        })
        .collect();
    let combined: Vec<f32> = model.params().iter().flat_map(|p| p.grad.data().to_vec()).collect();
    for (i, g) in combined.iter().enumerate() {
        let mean: f32 = grads.iter().map(|v| v[i]).sum::<f32>() / 4.0;
        assert!((g - mean).abs() <= 1e-6 + 1e-5 * mean.abs());
    }
}

#[test]
fn resumed_run_reproduces_the_uninterrupted_losses() {
    let dir = tempfile::tempdir().unwrap();
    let out = TrainOutput {
        dir: dir.path().join("run"),
    };
    let mut full_model = WaveNet::new(WaveNetConfig::tiny()).unwrap();
    let full = train(&mut full_model, &TinySource, &run_cfg(6, 1e-3), 0, None, |_| {}).unwrap();

    let mut first = WaveNet::new(WaveNetConfig::tiny()).unwrap();
    train(&mut first, &TinySource, &run_cfg(3, 1e-3), 0, Some(&out), |_| {}).unwrap();
    let ckpt = load_checkpoint(&out.step_checkpoint(3)).unwrap();
    assert_eq!(ckpt.train_step, 3);
    let restored: TrainRunConfig = serde_json::from_value(ckpt.trainer.clone().unwrap()).unwrap();
    assert_eq!(restored, run_cfg(3, 1e-3));

    let mut resumed = ckpt.model;
    let rest = train(&mut resumed, &TinySource, &run_cfg(6, 1e-3), 3, Some(&out), |_| {}).unwrap();
    let tail: Vec<u64> = full.records[3..].iter().map(|r| r.loss_nats.to_bits()).collect();
    let again: Vec<u64> = rest.records.iter().map(|r| r.loss_nats.to_bits()).collect();
    assert_eq!(tail, again);
    assert_eq!(resumed, full_model);

    let log = fs::read_to_string(out.log_path()).unwrap();
    let records: Vec<StepRecord> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4, 5]);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["step", "loss_nats", "wall_ms", "grad_norm"] {
            assert!(v.get(key).is_some(), "{key} missing in {line}");
        }
    }
}

#[test]
fn non_finite_loss_aborts_and_keeps_the_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = TrainOutput {
        dir: dir.path().to_path_buf(),
    };
    let mut model = WaveNet::new(WaveNetConfig::tiny()).unwrap();
    train(&mut model, &TinySource, &run_cfg(2, 1e-3), 0, Some(&out), |_| {}).unwrap();
    let saved = fs::read(out.latest_checkpoint()).unwrap();

    let id = model.layout().out.bias.unwrap();
    model.params_mut().get_mut(id).value.data_mut()[0] = f32::NAN;
    let err = train(&mut model, &TinySource, &run_cfg(4, 1e-3), 2, Some(&out), |_| {}).unwrap_err();
    assert!(matches!(err, TrainError::NonFiniteLoss { step: 2 }), "{err:?}");
    assert_eq!(fs::read(out.latest_checkpoint()).unwrap(), saved);
}

#[test]
fn gradient_clipping_is_logged() {
    let mut model = WaveNet::new(WaveNetConfig::tiny()).unwrap();
    let mut cfg = run_cfg(2, 1e-3);
    cfg.clip_norm = 1e-6;
    let s = train(&mut model, &TinySource, &cfg, 0, None, |_| {}).unwrap();
    assert!(s.records.iter().all(|r| r.clipped && r.grad_norm > 1e-6));
}

#[test]
fn manifest_round_trip_and_corpus_errors_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.wav");
    write_wav(&utterance(1000, 1), &a).unwrap();
    let entries = vec![
        ManifestEntry {
            path: a.clone(),
            duration_ms: 1000.0,
        },
        ManifestEntry {
            path: dir.path().join("missing.wav"),
            duration_ms: 500.0,
        },
    ];
    let manifest = dir.path().join("corpus.tsv");
    write_manifest(&manifest, &entries).unwrap();
    let text = fs::read_to_string(&manifest).unwrap();
    assert_eq!(text.lines().next().unwrap(), "a.wav\t1000.000");
    let back = read_manifest(&manifest).unwrap();
    assert_eq!(back, entries);
    assert_eq!(filter_by_duration(&back, 600.0, 2000.0).len(), 1);

    let spec = DegradationSpec::band_limit(8000);
    let ok = Corpus::load(&back[..1], &spec, 24000, 350.0, LogMelConfig::default()).unwrap();
    assert_eq!(ok.pairs.len(), 1);
    let err = Corpus::load(&back, &spec, 24000, 350.0, LogMelConfig::default()).unwrap_err();
    assert!(err.to_string().contains("missing.wav"), "{err}");
    assert!(matches!(
        Corpus::load(&[], &spec, 24000, 350.0, LogMelConfig::default()),
        Err(TrainError::EmptyCorpus)
    ));
}

#[test]
fn corpus_crops_drive_a_desk_step() {
    let corpus = Corpus::from_pairs(vec![pair(800, 6), pair(1200, 7)], 350.0, LogMelConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ex = corpus.sample(&mut rng).unwrap();
    assert_eq!(ex.target.len(), 8400);
    let mut model = WaveNet::new(WaveNetConfig::desk()).unwrap();
    let cfg = TrainRunConfig {
        batch_size: 1,
        steps: 1,
        checkpoint_every: 0,
        ..TrainRunConfig::default()
    };
    let s = train(&mut model, &corpus, &cfg, 0, None, |_| {}).unwrap();
    assert!(s.records[0].loss_nats < 11.1);
    let _: &MelSpectrogram = &ex.mel;
}

#[test]
fn tiny_model_overfits_one_repeated_crop() {
    let frames = 40;
    let example = TrainingExample {
        target: AudioBuffer::new(bwe_core::signal::tone(2.0, 640, frames * 8, 0.01), 640).unwrap(),
        cond_audio: AudioBuffer::silence(0, 8000).unwrap(),
        mel: random_mel(frames, 3, 1),
        offset: 0,
    };
    let mut model = WaveNet::new(WaveNetConfig::tiny()).unwrap();
    let mut cfg = run_cfg(2000, 3e-4);
    cfg.batch_size = 1;
    let losses: Vec<f64> = train(&mut model, &FixedCrop(example), &cfg, 0, None, |_| {})
        .unwrap()
        .records
        .iter()
        .map(|r| r.loss_nats)
        .collect();
    let last = *smoothed(&losses, 0.05).last().unwrap();
    assert!(last < 0.5 * losses[0], "{} -> {last}", losses[0]);
}
