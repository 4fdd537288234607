//! Objective metrics, spectrogram images and condition comparison reports.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::AudioBuffer;
use crate::dsp::{resample, stft_power, DspError, PowerSpectrogram, StftConfig};

/// Power floor used by all dB conversions here.
pub const EPS: f64 = 1e-10;
/// Cap applied to band SNR when the error vanishes.
pub const SNR_CAP_DB: f64 = 120.0;
pub const CSV_HEADER: &str = "utterance,condition,lsd_db,snr_low_db,duration_ms";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("sample rates differ: {reference} Hz vs {test} Hz")]
    RateMismatch { reference: u32, test: u32 },
    #[error("band [{lo}, {hi}] Hz contains no frequency bins")]
    EmptyBand { lo: f64, hi: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

/// 50 ms Hann window, 12.5 ms hop at `rate`, FFT rounded up to a power of two.
pub fn analysis_stft(rate: u32) -> Result<StftConfig, DspError> {
    StftConfig::from_ms_auto_fft(rate, 50.0, 12.5)
}

fn check_rates(a: &AudioBuffer, b: &AudioBuffer) -> Result<(), EvalError> {
    if a.sample_rate_hz() != b.sample_rate_hz() {
        return Err(EvalError::RateMismatch {
            reference: a.sample_rate_hz(),
            test: b.sample_rate_hz(),
        });
    }
    Ok(())
}

fn db(p: f64) -> f64 {
    10.0 * (p + EPS).log10()
}

/// Log-spectral distance in dB.
///
/// Both signals are trimmed to the shorter length. Frames in which both
/// signals are digital silence are left out of the mean, which keeps the
/// value unchanged when trailing silence is appended to both.
pub fn lsd(reference: &AudioBuffer, test: &AudioBuffer) -> Result<f64, EvalError> {
    check_rates(reference, test)?;
    let n = reference.len().min(test.len());
    let cfg = analysis_stft(reference.sample_rate_hz())?;
    let a = stft_power(&reference.samples()[..n], &cfg)?;
    let b = stft_power(&test.samples()[..n], &cfg)?;
    let mut total = 0.0;
    let mut frames = 0usize;
    for t in 0..a.num_frames {
        let (fa, fb) = (a.frame(t), b.frame(t));
        if fa.iter().all(|&p| p == 0.0) && fb.iter().all(|&p| p == 0.0) {
            continue;
        }
        let mean: f64 = fa
            .iter()
            .zip(fb)
            .map(|(&x, &y)| (db(x) - db(y)).powi(2))
            .sum::<f64>()
            / a.num_bins as f64;
        total += mean;
        frames += 1;
    }
    Ok(if frames == 0 { 0.0 } else { (total / frames as f64).sqrt() })
}

/// Zeroes every DFT bin outside `[f_lo, f_hi]` over the whole signal.
pub fn band_pass(samples: &[f64], rate: u32, f_lo: f64, f_hi: f64) -> Result<Vec<f64>, EvalError> {
    let n = samples.len();
    let nyquist = rate as f64 / 2.0;
    let kept = |k: usize| {
        let f = k.min(n - k) as f64 * rate as f64 / n as f64;
        f >= f_lo && f <= f_hi
    };
    if n == 0 || !(f_lo < f_hi) || f_lo > nyquist || !(0..=n / 2).any(kept) {
        return Err(EvalError::EmptyBand { lo: f_lo, hi: f_hi });
    }
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex<f64>> = samples.iter().map(|&x| Complex::new(x, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, c) in buf.iter_mut().enumerate() {
        if !kept(k) {
            *c = Complex::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    Ok(buf.iter().map(|c| c.re / n as f64).collect())
}

/// `10 log10(sum ref^2 / sum (ref - test)^2)` after band-passing both,
/// clamped to +-120 dB.
pub fn snr_band(reference: &AudioBuffer, test: &AudioBuffer, f_lo: f64, f_hi: f64) -> Result<f64, EvalError> {
    check_rates(reference, test)?;
    let n = reference.len().min(test.len());
    let rate = reference.sample_rate_hz();
    let r = band_pass(&reference.samples()[..n], rate, f_lo, f_hi)?;
    let t = band_pass(&test.samples()[..n], rate, f_lo, f_hi)?;
    let signal: f64 = r.iter().map(|x| x * x).sum();
    let error: f64 = r.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum();
    if error == 0.0 {
        return Ok(if signal == 0.0 { 0.0 } else { SNR_CAP_DB });
    }
    if signal == 0.0 {
        return Ok(-SNR_CAP_DB);
    }
    Ok((10.0 * (signal / error).log10()).clamp(-SNR_CAP_DB, SNR_CAP_DB))
}

/// 8-bit grayscale image, row 0 at the top.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Binary PGM (P5).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<(), EvalError> {
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&self.to_pgm()))
            .map_err(|source| EvalError::Io {
                path: path.to_path_buf(),
                source,
            })
    }
}

pub const DYNAMIC_RANGE_DB: f64 = 80.0;

/// Spectrogram image: one column per frame, one row per bin with the
/// lowest frequency at the bottom, 80 dB below the peak mapped to black.
pub fn spectrogram_image(buf: &AudioBuffer, cfg: &StftConfig) -> Result<GrayImage, EvalError> {
    let power = stft_power(buf.samples(), cfg)?;
    Ok(power_image(&power))
}

pub fn power_image(power: &PowerSpectrogram) -> GrayImage {
    let (w, h) = (power.num_frames, power.num_bins);
    let floor_db = db(0.0);
    let peak = power.data.iter().map(|&p| db(p)).fold(floor_db, f64::max);
    let top = peak.max(floor_db + DYNAMIC_RANGE_DB);
    let mut pixels = vec![0u8; w * h];
    for t in 0..w {
        for k in 0..h {
            let level = (db(power.get(t, k)) - (top - DYNAMIC_RANGE_DB)) / DYNAMIC_RANGE_DB;
            pixels[(h - 1 - k) * w + t] = (level.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    GrayImage {
        width: w,
        height: h,
        pixels,
    }
}

/// Writes the spectrogram of `buf` as a PGM with the default analysis.
pub fn render_spectrogram(buf: &AudioBuffer, path: &Path) -> Result<GrayImage, EvalError> {
    let img = spectrogram_image(buf, &analysis_stft(buf.sample_rate_hz())?)?;
    img.write_pgm(path)?;
    Ok(img)
}

/// Energy above `cutoff_hz` relative to total energy, in dB.
pub fn energy_above_db(buf: &AudioBuffer, cutoff_hz: f64) -> Result<f64, EvalError> {
    let cfg = analysis_stft(buf.sample_rate_hz())?;
    let power = stft_power(buf.samples(), &cfg)?;
    let bin_hz = buf.sample_rate_hz() as f64 / cfg.fft_size as f64;
    let (mut above, mut total) = (0.0, 0.0);
    for t in 0..power.num_frames {
        for (k, &p) in power.frame(t).iter().enumerate() {
            total += p;
            if k as f64 * bin_hz > cutoff_hz {
                above += p;
            }
        }
    }
    Ok(10.0 * ((above + EPS) / (total + EPS)).log10())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub utterance: String,
    pub condition: String,
    pub lsd_db: f64,
    pub snr_low_db: f64,
    pub duration_ms: f64,
    /// Original rate when the condition had to be resampled.
    #[serde(skip)]
    pub resampled_from: Option<u32>,
}

/// Upper edge of the band used for `snr_low_db`.
pub const LOW_BAND_HZ: f64 = 4000.0;

/// One row per condition, ordered by ascending LSD (ties by label).
/// Conditions at another rate are resampled to the reference rate first.
pub fn compare_conditions(
    utterance: &str,
    reference: &AudioBuffer,
    conditions: &[(String, AudioBuffer)],
) -> Result<Vec<EvalRow>, EvalError> {
    compare_conditions_band(utterance, reference, conditions, LOW_BAND_HZ)
}

/// [`compare_conditions`] with the SNR band `[0, low_band_hz]`.
pub fn compare_conditions_band(
    utterance: &str,
    reference: &AudioBuffer,
    conditions: &[(String, AudioBuffer)],
    low_band_hz: f64,
) -> Result<Vec<EvalRow>, EvalError> {
    let mut rows = Vec::with_capacity(conditions.len());
    for (label, audio) in conditions {
        let (audio, resampled_from) = if audio.sample_rate_hz() != reference.sample_rate_hz() {
            (
                resample(audio, reference.sample_rate_hz())?,
                Some(audio.sample_rate_hz()),
            )
        } else {
            (audio.clone(), None)
        };
        let n = reference.len().min(audio.len());
        rows.push(EvalRow {
            utterance: utterance.to_string(),
            condition: label.clone(),
            lsd_db: lsd(reference, &audio)?,
            snr_low_db: snr_band(reference, &audio, 0.0, low_band_hz)?,
            duration_ms: n as f64 * 1000.0 / reference.sample_rate_hz() as f64,
            resampled_from,
        });
    }
    sort_rows(&mut rows);
    Ok(rows)
}

pub fn sort_rows(rows: &mut [EvalRow]) {
    rows.sort_by(|a, b| {
        a.lsd_db
            .total_cmp(&b.lsd_db)
            .then_with(|| a.condition.cmp(&b.condition))
    });
}

pub fn write_report(path: &Path, rows: &[EvalRow]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER.split(','))?;
    for r in rows {
        w.write_record([
            r.utterance.clone(),
            r.condition.clone(),
            format!("{:.6}", r.lsd_db),
            format!("{:.6}", r.snr_low_db),
            format!("{:.3}", r.duration_ms),
        ])?;
    }
    w.flush().map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_report(path: &Path) -> Result<Vec<EvalRow>, EvalError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}
