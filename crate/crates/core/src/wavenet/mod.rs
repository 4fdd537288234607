//! Conditional WaveNet: conditioning stack, gated residual core, output
//! head and the discretized logistic mixture likelihood.

mod checkpoint;
pub mod mol;
mod model;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CheckpointError, CHECKPOINT_VERSION,
};
pub use model::{ConditionProjections, ConvIds, LayerSpec, ParamLayout, WaveNet};
pub use mol::{MolError, Quantization};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum WaveNetError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("audio has {audio} samples but conditioning covers {cond}")]
    LengthMismatch { audio: usize, cond: usize },
    #[error("mel frame rate {actual} Hz does not match the configured {expected} Hz")]
    RateMismatch { expected: f64, actual: f64 },
    #[error("mel has {actual} bins, model expects {expected}")]
    BinMismatch { expected: usize, actual: usize },
    #[error("sample {value} at index {index} lies outside [-1, 1]")]
    SampleOutOfRange { index: usize, value: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mol(#[from] MolError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WaveNetConfig {
    pub stacks: usize,
    pub layers_per_stack: usize,
    pub dilation_growth: usize,
    pub residual_channels: usize,
    pub filter_size: usize,
    pub input_conv_filter: usize,
    pub head_channels: usize,
    pub mixture_components: usize,
    pub mel_bins: usize,
    pub cond_layers: usize,
    pub cond_filter_size: usize,
    pub cond_transpose_layers: usize,
    pub cond_transpose_filter: usize,
    pub cond_repeat_factor: usize,
    pub output_rate_hz: u32,
    pub cond_rate_hz: u32,
    pub log_scale_min: f64,
    pub quantization_levels: u32,
    pub init_seed: u64,
}

impl Default for WaveNetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl WaveNetConfig {
    /// Full-size network: 3 stacks of 10 layers, 512 channels.
    pub fn full() -> Self {
        Self {
            stacks: 3,
            layers_per_stack: 10,
            dilation_growth: 2,
            residual_channels: 512,
            filter_size: 3,
            input_conv_filter: 4,
            head_channels: 256,
            mixture_components: 10,
            mel_bins: 80,
            cond_layers: 5,
            cond_filter_size: 3,
            cond_transpose_layers: 2,
            cond_transpose_filter: 4,
            cond_repeat_factor: 75,
            output_rate_hz: 24000,
            cond_rate_hz: 80,
            log_scale_min: -7.0,
            quantization_levels: 65536,
            init_seed: 0,
        }
    }

    /// Trainable on one CPU core: 1 stack of 8 layers, 64 channels.
    pub fn desk() -> Self {
        Self {
            stacks: 1,
            layers_per_stack: 8,
            residual_channels: 64,
            head_channels: 32,
            mixture_components: 5,
            ..Self::full()
        }
    }

    /// 1 stack of 3 layers with a handful of channels; used for gradient
    /// and receptive-field checks.
    pub fn tiny() -> Self {
        Self {
            stacks: 1,
            layers_per_stack: 3,
            residual_channels: 4,
            head_channels: 4,
            mixture_components: 2,
            mel_bins: 3,
            cond_repeat_factor: 2,
            output_rate_hz: 640,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<(), WaveNetError> {
        let counts = [
            ("stacks", self.stacks),
            ("layers_per_stack", self.layers_per_stack),
            ("dilation_growth", self.dilation_growth),
            ("residual_channels", self.residual_channels),
            ("filter_size", self.filter_size),
            ("input_conv_filter", self.input_conv_filter),
            ("head_channels", self.head_channels),
            ("mixture_components", self.mixture_components),
            ("mel_bins", self.mel_bins),
            ("cond_layers", self.cond_layers),
            ("cond_filter_size", self.cond_filter_size),
            ("cond_transpose_layers", self.cond_transpose_layers),
            ("cond_transpose_filter", self.cond_transpose_filter),
            ("cond_repeat_factor", self.cond_repeat_factor),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(WaveNetError::Config(format!("{name} must be >= 1")));
            }
        }
        if self.output_rate_hz == 0 || self.cond_rate_hz == 0 {
            return Err(WaveNetError::Config("rates must be positive".into()));
        }
        if self.cond_transpose_layers > 16 {
            return Err(WaveNetError::Config("too many transpose layers".into()));
        }
        let produced = self.cond_repeat_factor as u64
            * (1u64 << self.cond_transpose_layers)
            * self.cond_rate_hz as u64;
        if produced != self.output_rate_hz as u64 {
            return Err(WaveNetError::Config(format!(
                "cond_repeat_factor * 2^cond_transpose_layers * cond_rate_hz = {produced}, expected output_rate_hz {}",
                self.output_rate_hz
            )));
        }
        if !(self.log_scale_min.is_finite()) {
            return Err(WaveNetError::Config("log_scale_min must be finite".into()));
        }
        if self.quantization_levels < 2 {
            return Err(WaveNetError::Config("quantization_levels must be >= 2".into()));
        }
        let growth = self.dilation_growth as f64;
        if growth.powi(self.layers_per_stack as i32 - 1) > 1e9 {
            return Err(WaveNetError::Config("dilations overflow".into()));
        }
        Ok(())
    }

    /// Output audio samples per conditioning frame.
    pub fn samples_per_frame(&self) -> usize {
        self.cond_repeat_factor << self.cond_transpose_layers
    }

    pub fn dilations(&self) -> Vec<usize> {
        (0..self.stacks)
            .flat_map(|_| (0..self.layers_per_stack).map(|l| self.dilation_growth.pow(l as u32)))
            .collect()
    }

    /// Number of past samples that can influence one prediction.
    pub fn receptive_field(&self) -> usize {
        self.input_conv_filter
            + self
                .dilations()
                .iter()
                .map(|d| (self.filter_size - 1) * d)
                .sum::<usize>()
    }

    pub fn quantization(&self) -> Quantization {
        Quantization {
            levels: self.quantization_levels,
            log_scale_min: self.log_scale_min,
        }
    }

    pub fn params_per_step(&self) -> usize {
        3 * self.mixture_components
    }
}

/// Per-step mixture parameters laid out as
/// `[logits(M), means(M), raw log-scales(M)]`, one row per timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    pub components: usize,
    pub data: Vec<f32>,
}

impl MixtureParams {
    pub fn len(&self) -> usize {
        self.data.len() / (3 * self.components)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn step(&self, t: usize) -> &[f32] {
        let w = 3 * self.components;
        &self.data[t * w..(t + 1) * w]
    }

    pub fn logits(&self, t: usize) -> &[f32] {
        &self.step(t)[..self.components]
    }

    pub fn means(&self, t: usize) -> &[f32] {
        &self.step(t)[self.components..2 * self.components]
    }

    pub fn log_scales(&self, t: usize) -> &[f32] {
        &self.step(t)[2 * self.components..]
    }
}
