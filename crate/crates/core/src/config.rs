//! Declarative TOML configuration for the whole pipeline.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::{DegradationSpec, LogMelConfig};
use crate::mushra::ScreeningConfig;
use crate::trainer::TrainRunConfig;
use crate::wavenet::WaveNetConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("serialize error: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DspSection {
    pub mel: LogMelConfig,
    pub degradation: DegradationSpec,
}

impl Default for DspSection {
    fn default() -> Self {
        Self {
            mel: LogMelConfig::default(),
            degradation: DegradationSpec::band_limit(8000),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub temperature: f64,
    pub seed: u64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Upper edge of the band reported as `snr_low_db`.
    pub low_band_hz: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            low_band_hz: crate::evalkit::LOW_BAND_HZ,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct MushraSection {
    pub screening: ScreeningConfig,
}

/// Every setting the command-line tool needs. Missing keys take the desk
/// defaults; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub dsp: DspSection,
    pub wavenet: WaveNetConfig,
    pub trainer: TrainRunConfig,
    pub sampler: SamplerSection,
    pub evalkit: EvalSection,
    pub mushra: MushraSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl PipelineConfig {
    pub fn desk() -> Self {
        Self {
            dsp: DspSection::default(),
            wavenet: WaveNetConfig::desk(),
            trainer: TrainRunConfig::default(),
            sampler: SamplerSection::default(),
            evalkit: EvalSection::default(),
            mushra: MushraSection::default(),
        }
    }

    /// Full-size model and batch of 64.
    pub fn full() -> Self {
        Self {
            wavenet: WaveNetConfig::full(),
            trainer: TrainRunConfig {
                batch_size: 64,
                ..TrainRunConfig::default()
            },
            ..Self::desk()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical serialized form: every field written out in a fixed order.
    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.wavenet.validate().map_err(|e| invalid(&e))?;
        self.trainer
            .validate(self.dsp.mel.window_ms)
            .map_err(|e| invalid(&e))?;
        self.dsp.mel.filterbank().map_err(|e| invalid(&e))?;
        if self.dsp.mel.num_bins != self.wavenet.mel_bins {
            return Err(ConfigError::Invalid(format!(
                "dsp.mel.num_bins {} differs from wavenet.mel_bins {}",
                self.dsp.mel.num_bins, self.wavenet.mel_bins
            )));
        }
        if (self.dsp.mel.frame_rate_hz() - self.wavenet.cond_rate_hz as f64).abs() > 1e-9 {
            return Err(ConfigError::Invalid(format!(
                "mel frame rate {} Hz differs from wavenet.cond_rate_hz {}",
                self.dsp.mel.frame_rate_hz(),
                self.wavenet.cond_rate_hz
            )));
        }
        if self.dsp.mel.sample_rate_hz != self.dsp.degradation.target_rate_hz {
            return Err(ConfigError::Invalid(
                "dsp.mel.sample_rate_hz must equal dsp.degradation.target_rate_hz".into(),
            ));
        }
        if !(self.evalkit.low_band_hz > 0.0) {
            return Err(ConfigError::Invalid("evalkit.low_band_hz must be positive".into()));
        }
        if !(self.sampler.temperature > 0.0 && self.sampler.temperature.is_finite()) {
            return Err(ConfigError::Invalid("sampler.temperature must be positive".into()));
        }
        Ok(())
    }
}
