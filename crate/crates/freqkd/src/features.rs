//! F0 sub-band log-power-spectrum features.
//!
//! A waveform becomes a fixed 45 x 600 feature map: Blackman-windowed STFT
//! (window 1728, hop 130, FFT 1728), log power with a 1e-12 floor, keep the
//! first 45 bins (roughly 0-417 Hz at 16 kHz), then fix the time axis at 600
//! frames by truncation or mirror-periodic flip-concatenation.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use thiserror::Error;

use crate::audio_io::Waveform;

/// Rows of the sub-band feature map.
pub const SUBBAND_BINS: usize = 45;
/// Frames of the fixed-length feature map.
pub const TARGET_FRAMES: usize = 600;
/// Power floor applied before the log so silent frames stay finite.
pub const LOG_FLOOR: f64 = 1e-12;

const FEATURE_MAGIC: &[u8; 8] = b"FKDFEAT\0";

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("waveform too short: {len} samples < window length {win_len}")]
    TooShort { len: usize, win_len: usize },
    #[error("invalid stft config: {0}")]
    InvalidConfig(String),
    #[error("bad feature file {path}: {reason}")]
    BadFeatureFile { path: std::path::PathBuf, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Analysis window shape. Only Blackman is used by this pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    Blackman,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct StftConfig {
    pub window: WindowKind,
    pub win_len: usize,
    pub hop: usize,
    pub fft_len: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window: WindowKind::Blackman,
            win_len: 1728,
            hop: 130,
            fft_len: 1728,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.hop < 1 {
            return Err(FeatureError::InvalidConfig("hop must be >= 1".into()));
        }
        if self.win_len < 2 {
            return Err(FeatureError::InvalidConfig("win_len must be >= 2".into()));
        }
        if self.win_len > self.fft_len {
            return Err(FeatureError::InvalidConfig(
                "win_len must not exceed fft_len".into(),
            ));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    /// Number of frames produced for a waveform of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        (len - self.win_len) / self.hop + 1
    }
}

/// Log-power spectrogram, `[n_bins x n_frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub values: Array2<f64>,
    pub bin_hz: f64,
    pub utt_id: String,
}

/// Fixed-shape feature map, `[SUBBAND_BINS x TARGET_FRAMES]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub values: Array2<f64>,
    pub utt_id: String,
}

impl FeatureMap {
    pub fn has_canonical_shape(&self) -> bool {
        self.values.dim() == (SUBBAND_BINS, TARGET_FRAMES)
    }
}

/// Symmetric Blackman window:
/// `w[k] = 0.42 - 0.5 cos(2 pi k / (n-1)) + 0.08 cos(4 pi k / (n-1))`.
pub fn blackman_window(n: usize) -> Vec<f64> {
    assert!(n >= 2, "window length must be >= 2");
    let denom = (n - 1) as f64;
    (0..n)
        .map(|k| {
            let x = k as f64 / denom;
            0.42 - 0.5 * (std::f64::consts::TAU * x).cos()
                + 0.08 * (2.0 * std::f64::consts::TAU * x).cos()
        })
        .collect()
}

/// Per-frame power spectrum `|X|^2` before the floor and log, one vector of
/// `fft_len/2 + 1` bins per frame.
pub fn stft_power_frames(samples: &[f64], cfg: &StftConfig) -> Result<Vec<Vec<f64>>, FeatureError> {
    cfg.validate()?;
    if samples.len() < cfg.win_len {
        return Err(FeatureError::TooShort {
            len: samples.len(),
            win_len: cfg.win_len,
        });
    }
    let window = blackman_window(cfg.win_len);
    let n_frames = cfg.n_frames(samples.len());
    let n_bins = cfg.n_bins();

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cfg.fft_len);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_len];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];

    let mut frames = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let start = f * cfg.hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            let v = if i < cfg.win_len {
                samples[start + i] * window[i]
            } else {
                0.0
            };
            *slot = Complex::new(v, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        frames.push(buf[..n_bins].iter().map(|c| c.norm_sqr()).collect());
    }
    Ok(frames)
}

/// Log power spectrum of a waveform.
pub fn lps(w: &Waveform, cfg: &StftConfig) -> Result<Spectrogram, FeatureError> {
    let frames = stft_power_frames(&w.samples, cfg)?;
    let n_bins = cfg.n_bins();
    let n_frames = frames.len();
    let mut values = Array2::<f64>::zeros((n_bins, n_frames));
    for (f, frame) in frames.iter().enumerate() {
        for (b, &p) in frame.iter().enumerate() {
            values[[b, f]] = p.max(LOG_FLOOR).ln();
        }
    }
    Ok(Spectrogram {
        values,
        bin_hz: w.sample_rate_hz as f64 / cfg.fft_len as f64,
        utt_id: w.utt_id.clone(),
    })
}

/// Keep the first `n_bins` rows and fix the time axis at `n_frames` frames.
///
/// Short inputs are extended by alternating the map with its time-reversed
/// copy (original, reversed, original, ...) before truncation, which makes
/// the time axis mirror-periodic.
pub fn subband_and_fix(s: &Spectrogram, n_bins: usize, n_frames: usize) -> FeatureMap {
    let (in_bins, in_frames) = s.values.dim();
    assert!(in_bins >= n_bins, "spectrogram has {in_bins} bins, need {n_bins}");
    assert!(in_frames >= 1, "spectrogram has no frames");

    let band = s.values.slice(s![..n_bins, ..]);
    let mut values = Array2::<f64>::zeros((n_bins, n_frames));
    let mut filled = 0usize;
    let mut reversed = false;
    while filled < n_frames {
        let take = (n_frames - filled).min(in_frames);
        for j in 0..take {
            let src = if reversed { in_frames - 1 - j } else { j };
            values
                .slice_mut(s![.., filled + j])
                .assign(&band.slice(s![.., src]));
        }
        filled += take;
        reversed = !reversed;
    }
    FeatureMap {
        values,
        utt_id: s.utt_id.clone(),
    }
}

/// Full feature extraction: waveform to 45 x 600 map.
pub fn extract(w: &Waveform, cfg: &StftConfig) -> Result<FeatureMap, FeatureError> {
    let spec = lps(w, cfg)?;
    Ok(subband_and_fix(&spec, SUBBAND_BINS, TARGET_FRAMES))
}

/// Write a feature map in the binary cache format: 8-byte magic, u32 LE
/// bins, u32 LE frames, then f32 LE values in row-major (bin-major) order.
pub fn write_feature_map(map: &FeatureMap, path: &Path) -> Result<(), FeatureError> {
    let (bins, frames) = map.values.dim();
    let mut out = Vec::with_capacity(16 + bins * frames * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(bins as u32).to_le_bytes());
    out.extend_from_slice(&(frames as u32).to_le_bytes());
    for &v in map.values.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| FeatureError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    f.write_all(&out).map_err(|e| FeatureError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Read a feature map written by [`write_feature_map`]; the utterance id is
/// taken from the file stem.
pub fn read_feature_map(path: &Path) -> Result<FeatureMap, FeatureError> {
    let bad = |reason: &str| FeatureError::BadFeatureFile {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let bytes = fs::read(path).map_err(|e| FeatureError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    if bytes.len() < 16 || &bytes[..8] != FEATURE_MAGIC {
        return Err(bad("missing magic header"));
    }
    let bins = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let frames = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = 16 + bins * frames * 4;
    if bytes.len() != expected {
        return Err(bad("size does not match header shape"));
    }
    let mut values = Array2::<f64>::zeros((bins, frames));
    for (i, v) in values.iter_mut().enumerate() {
        let at = 16 + i * 4;
        *v = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as f64;
    }
    let utt_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(FeatureMap { values, utt_id })
}
