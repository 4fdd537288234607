//! Training data assembly and the teacher-forced training loop.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::{read_wav, AudioBuffer, WavError};
use crate::dsp::{degrade, log_mel, resample, DegradationSpec, DspError, LogMelConfig, MelSpectrogram};
use crate::tensor::{adam_step, AdamConfig, TensorError};
use crate::wavenet::mol::MolError;
use crate::wavenet::{save_checkpoint, Checkpoint, CheckpointError, WaveNet, WaveNetError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: WavError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("audio of {len} samples is shorter than one {crop_ms} ms crop")]
    TooShort { len: usize, crop_ms: f64 },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}; last good checkpoint kept")]
    NonFiniteLoss { step: u64 },
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Model(#[from] WaveNetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// One aligned training crop.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub target: AudioBuffer,
    pub cond_audio: AudioBuffer,
    pub mel: MelSpectrogram,
    /// Crop start in low-rate samples.
    pub offset: usize,
}

/// A wideband utterance and its degraded counterpart, trimmed so that
/// `hi.len() == ratio * lo.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub id: String,
    pub hi: AudioBuffer,
    pub lo: AudioBuffer,
}

impl TrainingPair {
    pub fn ratio(&self) -> usize {
        (self.hi.sample_rate_hz() / self.lo.sample_rate_hz()) as usize
    }
}

fn crop_len(rate_hz: u32, crop_ms: f64) -> usize {
    (crop_ms * rate_hz as f64 / 1000.0).round() as usize
}

pub fn make_pair(
    utterance: &AudioBuffer,
    spec: &DegradationSpec,
    crop_ms: f64,
) -> Result<TrainingPair, TrainError> {
    let need = crop_len(utterance.sample_rate_hz(), crop_ms);
    if utterance.len() < need {
        return Err(TrainError::TooShort {
            len: utterance.len(),
            crop_ms,
        });
    }
    if !utterance.sample_rate_hz().is_multiple_of(spec.target_rate_hz) {
        return Err(TrainError::Config(format!(
            "{} Hz is not an integer multiple of {} Hz",
            utterance.sample_rate_hz(),
            spec.target_rate_hz
        )));
    }
    let ratio = (utterance.sample_rate_hz() / spec.target_rate_hz) as usize;
    let lo = degrade(utterance, spec)?;
    let n = lo.len().min(utterance.len() / ratio);
    Ok(TrainingPair {
        id: String::new(),
        hi: utterance.slice(0, n * ratio),
        lo: lo.slice(0, n),
    })
}

/// Draws a hop-aligned crop and computes its mel from the low-rate segment.
pub fn sample_crop<R: Rng + ?Sized>(
    pair: &TrainingPair,
    rng: &mut R,
    crop_ms: f64,
    mel: &LogMelConfig,
) -> Result<TrainingExample, TrainError> {
    let lo_rate = pair.lo.sample_rate_hz();
    let hop = (mel.hop_ms * lo_rate as f64 / 1000.0).round() as usize;
    let crop = crop_len(lo_rate, crop_ms);
    if hop == 0 || !crop.is_multiple_of(hop) {
        return Err(TrainError::Config(format!(
            "crop of {crop} samples is not a whole number of {hop}-sample hops"
        )));
    }
    if pair.lo.len() < crop {
        return Err(TrainError::TooShort {
            len: pair.lo.len(),
            crop_ms,
        });
    }
    let positions = (pair.lo.len() - crop) / hop + 1;
    let offset = rng.random_range(0..positions) * hop;
    crop_at(pair, offset, crop_ms, mel)
}

/// The crop starting at low-rate sample `offset`.
pub fn crop_at(
    pair: &TrainingPair,
    offset: usize,
    crop_ms: f64,
    mel: &LogMelConfig,
) -> Result<TrainingExample, TrainError> {
    let crop = crop_len(pair.lo.sample_rate_hz(), crop_ms);
    if offset + crop > pair.lo.len() {
        return Err(TrainError::TooShort {
            len: pair.lo.len(),
            crop_ms,
        });
    }
    let ratio = pair.ratio();
    let cond_audio = pair.lo.slice(offset, crop);
    let target = pair.hi.slice(offset * ratio, crop * ratio);
    let mel = log_mel(&cond_audio, mel)?;
    Ok(TrainingExample {
        target,
        cond_audio,
        mel,
        offset,
    })
}

/// Anything that can hand out training crops.
pub trait CropSource {
    fn sample(&self, rng: &mut ChaCha8Rng) -> Result<TrainingExample, TrainError>;
}

/// Always returns the same crop.
#[derive(Debug, Clone)]
pub struct FixedCrop(pub TrainingExample);

impl CropSource for FixedCrop {
    fn sample(&self, _rng: &mut ChaCha8Rng) -> Result<TrainingExample, TrainError> {
        Ok(self.0.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub duration_ms: f64,
}

/// `path<TAB>duration_ms` per line. Relative paths resolve against the
/// manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, TrainError> {
    let io_err = |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    };
    let base = path.parent().unwrap_or(Path::new("."));
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let (p, d) = line.split_once('\t').ok_or_else(|| TrainError::Manifest {
            line: i + 1,
            message: "expected path<TAB>duration_ms".into(),
        })?;
        let duration_ms = d.trim().parse::<f64>().map_err(|e| TrainError::Manifest {
            line: i + 1,
            message: format!("duration: {e}"),
        })?;
        let p = PathBuf::from(p);
        entries.push(ManifestEntry {
            path: if p.is_absolute() { p } else { base.join(p) },
            duration_ms,
        });
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), TrainError> {
    let io_err = |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    };
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for e in entries {
        let p = e.path.strip_prefix(base).unwrap_or(&e.path);
        writeln!(out, "{}\t{:.3}", p.display(), e.duration_ms).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Keeps entries whose duration lies in `[min_ms, max_ms]`.
pub fn filter_by_duration(entries: &[ManifestEntry], min_ms: f64, max_ms: f64) -> Vec<ManifestEntry> {
    entries
        .iter()
        .filter(|e| e.duration_ms >= min_ms && e.duration_ms <= max_ms)
        .cloned()
        .collect()
}

/// Degraded pairs for every usable utterance of a manifest.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub pairs: Vec<TrainingPair>,
    pub crop_ms: f64,
    pub mel: LogMelConfig,
}

impl Corpus {
    /// Reads and degrades every listed file. Files shorter than one crop
    /// are skipped with a warning; read failures abort.
    pub fn load(
        entries: &[ManifestEntry],
        spec: &DegradationSpec,
        output_rate_hz: u32,
        crop_ms: f64,
        mel: LogMelConfig,
    ) -> Result<Self, TrainError> {
        let mut pairs = Vec::new();
        for e in entries {
            let mut buf = read_wav(&e.path).map_err(|source| TrainError::Read {
                path: e.path.clone(),
                source,
            })?;
            if buf.sample_rate_hz() != output_rate_hz {
                log::info!("{}: resampling {} Hz to {output_rate_hz} Hz", e.path.display(), buf.sample_rate_hz());
                buf = resample(&buf, output_rate_hz)?;
            }
            match make_pair(&buf, spec, crop_ms) {
                Ok(mut pair) => {
                    pair.id = e.path.display().to_string();
                    pairs.push(pair);
                }
                Err(TrainError::TooShort { .. }) => {
                    log::warn!("{}: shorter than one crop, skipped", e.path.display());
                }
                Err(err) => return Err(err),
            }
        }
        Self::from_pairs(pairs, crop_ms, mel)
    }

    pub fn from_pairs(pairs: Vec<TrainingPair>, crop_ms: f64, mel: LogMelConfig) -> Result<Self, TrainError> {
        if pairs.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        Ok(Self { pairs, crop_ms, mel })
    }
}

impl CropSource for Corpus {
    fn sample(&self, rng: &mut ChaCha8Rng) -> Result<TrainingExample, TrainError> {
        let pair = &self.pairs[rng.random_range(0..self.pairs.len())];
        sample_crop(pair, rng, self.crop_ms, &self.mel)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRunConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub adam: AdamConfig,
    pub crop_ms: f64,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Global gradient-norm clip; a NaN guard rather than a tuning knob.
    pub clip_norm: f64,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            steps: 1000,
            adam: AdamConfig::default(),
            crop_ms: 350.0,
            seed: 0,
            checkpoint_every: 100,
            clip_norm: 100.0,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self, window_ms: f64) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if !(self.crop_ms > window_ms) {
            return Err(TrainError::Config(format!(
                "crop_ms {} must exceed the {window_ms} ms analysis window",
                self.crop_ms
            )));
        }
        if !(self.clip_norm > 0.0) {
            return Err(TrainError::Config("clip_norm must be positive".into()));
        }
        self.adam
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss_nats: f64,
    pub wall_ms: f64,
    pub grad_norm: f64,
    #[serde(default)]
    pub clipped: bool,
}

/// Where a run writes its log and checkpoints.
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub fn log_path(&self) -> PathBuf {
        self.dir.join("train_log.jsonl")
    }

    pub fn latest_checkpoint(&self) -> PathBuf {
        self.dir.join("latest.bwxc")
    }

    pub fn step_checkpoint(&self, step: u64) -> PathBuf {
        self.dir.join(format!("step_{step:08}.bwxc"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub first_step: u64,
    pub final_step: u64,
    pub records: Vec<StepRecord>,
}

/// Per-step generator: the same (seed, step) always yields the same batch,
/// so a resumed run continues exactly where the original would have.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Mean loss over a batch, with the gradient of that mean accumulated
/// into the model's parameter gradients.
pub fn batch_loss(model: &mut WaveNet, batch: &[TrainingExample]) -> Result<f64, TrainError> {
    let scale = 1.0 / batch.len() as f32;
    let mut total = 0.0;
    model.params_mut().zero_grads();
    for ex in batch {
        let (g, loss) = model.loss_graph(ex.target.samples(), &ex.mel)?;
        total += g.value(loss).item() as f64;
        let grads = g.backward_scaled(loss, scale)?;
        model.params_mut().accumulate(&grads);
    }
    Ok(total / batch.len() as f64)
}

/// Runs steps `start_step..cfg.steps`. Checkpoints carry the run config so
/// a run can be resumed from them.
pub fn train(
    model: &mut WaveNet,
    source: &dyn CropSource,
    cfg: &TrainRunConfig,
    start_step: u64,
    output: Option<&TrainOutput>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainSummary, TrainError> {
    cfg.validate(0.0)?;
    let mut log = match output {
        Some(out) => {
            fs::create_dir_all(&out.dir).map_err(|source| TrainError::Io {
                path: out.dir.clone(),
                source,
            })?;
            let path = out.log_path();
            let file = OpenOptions::new()
                .create(true)
                .append(start_step > 0)
                .write(true)
                .truncate(start_step == 0)
                .open(&path)
                .map_err(|source| TrainError::Io { path, source })?;
            Some(BufWriter::new(file))
        }
        None => None,
    };
    let trainer_json = serde_json::to_value(cfg).map_err(|e| TrainError::Config(e.to_string()))?;
    let save = |model: &WaveNet, step: u64, keep: bool| -> Result<(), TrainError> {
        if let Some(out) = output {
            let ckpt = Checkpoint {
                model: model.clone(),
                train_step: step,
                trainer: Some(trainer_json.clone()),
            };
            save_checkpoint(&ckpt, &out.latest_checkpoint())?;
            if keep {
                save_checkpoint(&ckpt, &out.step_checkpoint(step))?;
            }
        }
        Ok(())
    };

    let mut records = Vec::new();
    for step in start_step..cfg.steps {
        let started = Instant::now();
        let mut rng = step_rng(cfg.seed, step);
        let batch = (0..cfg.batch_size)
            .map(|_| source.sample(&mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        let loss = match batch_loss(model, &batch) {
            Err(TrainError::Model(WaveNetError::Mol(MolError::NonFinite(_)))) => f64::NAN,
            other => other?,
        };
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }
        let grad_norm = model.params().grad_norm();
        if !grad_norm.is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }
        let clipped = grad_norm > cfg.clip_norm;
        if clipped {
            log::info!("step {step}: clipping gradient norm {grad_norm:.3} to {}", cfg.clip_norm);
            model.params_mut().scale_grads((cfg.clip_norm / grad_norm) as f32);
        }
        adam_step(model.params_mut(), &cfg.adam, step + 1)?;

        let record = StepRecord {
            step,
            loss_nats: loss,
            wall_ms: started.elapsed().as_secs_f64() * 1000.0,
            grad_norm,
            clipped,
        };
        if let (Some(w), Some(out)) = (log.as_mut(), output) {
            let line = serde_json::to_string(&record).map_err(|e| TrainError::Config(e.to_string()))?;
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|source| TrainError::Io {
                    path: out.log_path(),
                    source,
                })?;
        }
        on_step(&record);
        records.push(record);
        let done = step + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.steps {
            save(model, done, false)?;
        }
    }
    let final_step = cfg.steps.max(start_step);
    save(model, final_step, true)?;
    Ok(TrainSummary {
        first_step: start_step,
        final_step,
        records,
    })
}

/// Exponential moving average of the loss curve.
pub fn smoothed(losses: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(losses.len());
    let mut acc = None;
    for &l in losses {
        let v = match acc {
            None => l,
            Some(a) => alpha * l + (1.0 - alpha) * a,
        };
        acc = Some(v);
        out.push(v);
    }
    out
}
