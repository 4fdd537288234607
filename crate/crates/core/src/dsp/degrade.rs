use std::process::Command;

use serde::{Deserialize, Serialize};

use super::resample::resample;
use super::DspError;
use crate::audio_io::{read_wav, write_wav, AudioBuffer};

/// Codec frame length used for the output length tolerance.
pub const CODEC_FRAME_MS: u32 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationMode {
    BandLimitOnly,
    ExternalCodec,
}

/// How a wideband utterance becomes its narrowband counterpart.
///
/// `external_codec_command` is a shell command template containing `{in}`
/// and `{out}` placeholders, e.g.
/// `sox {in} -r 8000 -t gsm - | sox -t gsm - {out}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationSpec {
    pub target_rate_hz: u32,
    pub mode: DegradationMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external_codec_command: Option<String>,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self::band_limit(8000)
    }
}

impl DegradationSpec {
    pub fn band_limit(target_rate_hz: u32) -> Self {
        Self {
            target_rate_hz,
            mode: DegradationMode::BandLimitOnly,
            external_codec_command: None,
        }
    }

    pub fn external(target_rate_hz: u32, command: impl Into<String>) -> Self {
        Self {
            target_rate_hz,
            mode: DegradationMode::ExternalCodec,
            external_codec_command: Some(command.into()),
        }
    }
}

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}

pub fn degrade(buf: &AudioBuffer, spec: &DegradationSpec) -> Result<AudioBuffer, DspError> {
    if spec.target_rate_hz >= buf.sample_rate_hz() {
        return Err(DspError::TargetNotBelowSource {
            target: spec.target_rate_hz,
            source_hz: buf.sample_rate_hz(),
        });
    }
    let narrow = resample(buf, spec.target_rate_hz)?;
    match spec.mode {
        DegradationMode::BandLimitOnly => Ok(narrow),
        DegradationMode::ExternalCodec => {
            let template = spec
                .external_codec_command
                .as_deref()
                .ok_or(DspError::MissingCodecCommand)?;
            run_codec(&narrow, template)
        }
    }
}

fn run_codec(narrow: &AudioBuffer, template: &str) -> Result<AudioBuffer, DspError> {
    // Each call gets its own directory, so concurrent invocations never
    // share file names.
    let dir = tempfile::Builder::new().prefix("bwe-codec").tempdir()?;
    let input = dir.path().join("in.wav");
    let output = dir.path().join("out.wav");
    write_wav(narrow, &input)?;

    let command = template
        .replace("{in}", &shell_quote(&input.to_string_lossy()))
        .replace("{out}", &shell_quote(&output.to_string_lossy()));
    let result = Command::new("sh").arg("-c").arg(&command).output()?;
    if !result.status.success() {
        let mut diagnostics = String::from_utf8_lossy(&result.stderr).trim().to_string();
        let stdout = String::from_utf8_lossy(&result.stdout);
        if !stdout.trim().is_empty() {
            diagnostics.push_str(" | stdout: ");
            diagnostics.push_str(stdout.trim());
        }
        return Err(DspError::CodecFailed {
            status: result.status.to_string(),
            diagnostics,
        });
    }

    let decoded = read_wav(&output).map_err(DspError::CodecOutput)?;
    let expected_rate = narrow.sample_rate_hz();
    if decoded.sample_rate_hz() != expected_rate {
        return Err(DspError::CodecRate {
            expected: expected_rate,
            actual: decoded.sample_rate_hz(),
        });
    }
    let frame = (expected_rate * CODEC_FRAME_MS / 1000) as usize;
    if decoded.len().abs_diff(narrow.len()) > frame {
        return Err(DspError::CodecLength {
            expected: narrow.len(),
            actual: decoded.len(),
        });
    }
    Ok(decoded)
}
