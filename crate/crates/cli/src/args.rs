use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "bwe", version, about = "Speech bandwidth extension from 8 kHz to 24 kHz")]
pub struct Cli {
    /// Pipeline configuration (TOML). Desk-scale defaults when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Turn a directory of wideband WAVs into narrowband ones plus a manifest.
    Degrade(DegradeArgs),
    /// Train a model on a corpus of wideband WAVs.
    Train(TrainArgs),
    /// Extend one narrowband WAV to the model's output rate.
    Synthesize(SynthesizeArgs),
    /// Compare condition directories against references (LSD, SNR, spectrograms).
    Evaluate(EvaluateArgs),
    /// Write a blinded MUSHRA test definition.
    MushraPrepare(MushraPrepareArgs),
    /// Serve a MUSHRA test over HTTP.
    ServeMushra(ServeArgs),
    /// Print a canonical configuration.
    Config(ConfigArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    BandLimit,
    Codec,
}

#[derive(Debug, Args)]
pub struct DurationFilter {
    /// Skip utterances shorter than this.
    #[arg(long, value_name = "MS")]
    pub min_ms: Option<f64>,
    /// Skip utterances longer than this.
    #[arg(long, value_name = "MS")]
    pub max_ms: Option<f64>,
}

impl DurationFilter {
    pub fn bounds(&self) -> (f64, f64) {
        (self.min_ms.unwrap_or(0.0), self.max_ms.unwrap_or(f64::INFINITY))
    }

    pub fn keeps(&self, duration_ms: f64) -> bool {
        let (lo, hi) = self.bounds();
        duration_ms >= lo && duration_ms <= hi
    }
}

#[derive(Debug, Args)]
pub struct DegradeArgs {
    #[arg(long, value_name = "DIR")]
    pub in_dir: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    /// Overrides `dsp.degradation.mode`.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Shell template with `{in}` and `{out}`; implies `--mode codec`.
    #[arg(long, value_name = "TEMPLATE")]
    pub codec_cmd: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub filter: DurationFilter,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of wideband WAVs or a manifest (`path<TAB>duration_ms`).
    #[arg(long, value_name = "DIR|FILE")]
    pub corpus: PathBuf,
    /// Output directory for `train_log.jsonl` and checkpoints.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Overrides `trainer.steps` (the total, including resumed steps).
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue from a checkpoint; defaults to `<out>/latest.bwxc`.
    #[arg(long, value_name = "CHECKPOINT", num_args = 0..=1)]
    pub resume: Option<Option<PathBuf>>,
    #[command(flatten)]
    pub filter: DurationFilter,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Narrowband input WAV.
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Overrides `sampler.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `sampler.temperature`.
    #[arg(long)]
    pub temperature: Option<f64>,
}

/// `label=dir`, or a bare directory labeled by its own name.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDir {
    pub label: String,
    pub dir: PathBuf,
}

impl FromStr for LabeledDir {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (label, dir) = match s.split_once('=') {
            Some((l, d)) => (l.to_string(), PathBuf::from(d)),
            None => {
                let dir = PathBuf::from(s);
                let label = dir
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .ok_or_else(|| format!("cannot derive a label from {s:?}; use label=dir"))?;
                (label, dir)
            }
        };
        if label.is_empty() {
            return Err(format!("empty label in {s:?}"));
        }
        Ok(Self { label, dir })
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_name = "DIR")]
    pub ref_dir: PathBuf,
    /// One directory per condition, files named like the references.
    #[arg(long = "cond-dir", alias = "cond-dirs", value_name = "LABEL=DIR", num_args = 1.., required = true)]
    pub cond_dirs: Vec<LabeledDir>,
    /// CSV report path.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Write PGM spectrograms of every file here.
    #[arg(long, value_name = "DIR")]
    pub spectrograms: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct MushraPrepareArgs {
    #[arg(long, value_name = "DIR")]
    pub ref_dir: PathBuf,
    #[arg(long = "cond-dirs", alias = "cond-dir", value_name = "LABEL=DIR", num_args = 1.., required = true)]
    pub cond_dirs: Vec<LabeledDir>,
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[arg(long, default_value = "mushra")]
    pub test_id: String,
    /// Hidden-reference label; added from `--ref-dir` when not among the conditions.
    #[arg(long, default_value = "hidden_reference")]
    pub hidden_reference: String,
    /// Anchor label; must name one of the conditions.
    #[arg(long)]
    pub anchor: String,
    /// Token seed; random when omitted.
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub filter: DurationFilter,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Test definition files.
    #[arg(long = "test", value_name = "FILE", required = true)]
    pub tests: Vec<PathBuf>,
    /// Append-only ratings journal, replayed at startup.
    #[arg(long, value_name = "FILE")]
    pub journal: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Rater UI assets, served at `/`.
    #[arg(long, value_name = "DIR")]
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Desk,
    Full,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Print a preset instead of the loaded `--config`.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
}
