//! Time-domain waveform augmentation: impulsive signal-dependent (ISD)
//! noise and stationary signal-independent (SSI) additive noise.
//!
//! SSI draws white noise, colours it with a cascade of random second-order
//! peaking filters, and scales it to hit a target SNR drawn from a
//! configurable range. ISD perturbs a fixed fraction of sample positions by
//! amounts proportional to the local amplitude. Outputs are hard-clipped to
//! `[-1, 1]`; all randomness comes from an owned [`RngStream`].

use serde::{Deserialize, Serialize};

use crate::audio_io::Waveform;
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsiConfig {
    /// Number of random band filters in the colouring cascade.
    pub n_bands: usize,
    pub min_center_hz: f64,
    pub max_center_hz: f64,
    pub min_bandwidth_hz: f64,
    pub max_bandwidth_hz: f64,
    pub min_gain_db: f64,
    pub max_gain_db: f64,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
}

impl Default for SsiConfig {
    fn default() -> Self {
        Self {
            n_bands: 5,
            min_center_hz: 20.0,
            max_center_hz: 8_000.0,
            min_bandwidth_hz: 100.0,
            max_bandwidth_hz: 1_000.0,
            min_gain_db: 0.0,
            max_gain_db: 20.0,
            snr_min_db: 10.0,
            snr_max_db: 40.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IsdConfig {
    /// Percent of sample positions to perturb, in (0, 100].
    pub p_samples_pct: f64,
    /// Amplitude-control gain in dB bounding the perturbation factor.
    pub g_sd_db: f64,
}

impl Default for IsdConfig {
    fn default() -> Self {
        Self {
            p_samples_pct: 10.0,
            g_sd_db: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RawboostMode {
    SsiOnly,
    IsdOnly,
    SeriesIsdThenSsi,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RawboostConfig {
    pub ssi: SsiConfig,
    pub isd: IsdConfig,
    pub mode: RawboostMode,
}

impl Default for RawboostConfig {
    fn default() -> Self {
        Self {
            ssi: SsiConfig::default(),
            isd: IsdConfig::default(),
            mode: RawboostMode::SeriesIsdThenSsi,
        }
    }
}

impl RawboostConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.ssi.snr_min_db > self.ssi.snr_max_db {
            return Err("ssi.snr_min_db must not exceed ssi.snr_max_db".into());
        }
        if self.ssi.n_bands < 1 {
            return Err("ssi.n_bands must be >= 1".into());
        }
        if !(self.isd.p_samples_pct > 0.0 && self.isd.p_samples_pct <= 100.0) {
            return Err("isd.p_samples_pct must be in (0, 100]".into());
        }
        Ok(())
    }
}

/// Result of [`apply_ssi`]; `degenerate_input` is set when the input had no
/// energy so no SNR could be defined and the signal passed through.
#[derive(Debug, Clone)]
pub struct SsiOutcome {
    pub waveform: Waveform,
    pub degenerate_input: bool,
}

/// Second-order peaking filter (RBJ cookbook), direct form 2 transposed.
struct Biquad {
    b0: f64,
    b1: f64,
    b2: f64,
    a1: f64,
    a2: f64,
}

impl Biquad {
    fn peaking(fs: f64, center_hz: f64, bandwidth_hz: f64, gain_db: f64) -> Self {
        let a = 10f64.powf(gain_db / 40.0);
        let w0 = std::f64::consts::TAU * (center_hz / fs).min(0.5);
        let q = (center_hz / bandwidth_hz).max(0.05);
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha / a;
        Self {
            b0: (1.0 + alpha * a) / a0,
            b1: -2.0 * w0.cos() / a0,
            b2: (1.0 - alpha * a) / a0,
            a1: -2.0 * w0.cos() / a0,
            a2: (1.0 - alpha / a) / a0,
        }
    }

    fn process(&self, x: &mut [f64]) {
        let mut s1 = 0.0f64;
        let mut s2 = 0.0f64;
        for v in x.iter_mut() {
            let input = *v;
            let y = self.b0 * input + s1;
            s1 = self.b1 * input - self.a1 * y + s2;
            s2 = self.b2 * input - self.a2 * y;
            *v = y;
        }
    }
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Stationary signal-independent additive noise at a random SNR.
///
/// Draw order (fixed for reproducibility): per band centre, bandwidth and
/// gain, then the target SNR, then the white-noise samples.
pub fn apply_ssi(w: &Waveform, cfg: &RawboostConfig, rng: &mut RngStream) -> SsiOutcome {
    assert!(!w.samples.is_empty(), "waveform must be non-empty");
    let p_sig = power(&w.samples);
    if p_sig == 0.0 {
        log::warn!("ssi: all-zero input {}, SNR undefined; passing through", w.utt_id);
        return SsiOutcome {
            waveform: w.clone(),
            degenerate_input: true,
        };
    }

    let ssi = &cfg.ssi;
    let filters: Vec<Biquad> = (0..ssi.n_bands)
        .map(|_| {
            let center = rng.range_f64(ssi.min_center_hz, ssi.max_center_hz);
            let bw = rng.range_f64(ssi.min_bandwidth_hz, ssi.max_bandwidth_hz);
            let gain = rng.range_f64(ssi.min_gain_db, ssi.max_gain_db);
            Biquad::peaking(w.sample_rate_hz as f64, center, bw, gain)
        })
        .collect();
    let target_snr_db = rng.range_f64(ssi.snr_min_db, ssi.snr_max_db);

    let mut noise: Vec<f64> = (0..w.samples.len()).map(|_| rng.normal()).collect();
    for f in &filters {
        f.process(&mut noise);
    }
    let p_noise = power(&noise);
    let scale = if p_noise > 0.0 {
        (p_sig / (p_noise * 10f64.powf(target_snr_db / 10.0))).sqrt()
    } else {
        0.0
    };

    let samples = w
        .samples
        .iter()
        .zip(&noise)
        .map(|(&x, &n)| (x + scale * n).clamp(-1.0, 1.0))
        .collect();
    SsiOutcome {
        waveform: Waveform {
            samples,
            sample_rate_hz: w.sample_rate_hz,
            utt_id: w.utt_id.clone(),
        },
        degenerate_input: false,
    }
}

/// Impulsive signal-dependent noise: perturb `round(p% * len)` distinct
/// positions by a random signed fraction of the local amplitude.
pub fn apply_isd(w: &Waveform, cfg: &RawboostConfig, rng: &mut RngStream) -> Waveform {
    assert!(!w.samples.is_empty(), "waveform must be non-empty");
    let len = w.samples.len();
    let k = (cfg.isd.p_samples_pct / 100.0 * len as f64).round() as usize;
    let k = k.min(len);
    let g_lin = 10f64.powf(cfg.isd.g_sd_db / 20.0);

    let mut samples = w.samples.clone();
    // Positions are drawn without replacement; perturbations are applied in
    // ascending position order so the draw sequence is well-defined.
    for i in rng.sample_indices(len, k) {
        let sign = if rng.flip() { 1.0 } else { -1.0 };
        let factor = rng.range_f64(0.0, g_lin);
        let delta = sign * factor * samples[i].abs();
        samples[i] = (samples[i] + delta).clamp(-1.0, 1.0);
    }
    Waveform {
        samples,
        sample_rate_hz: w.sample_rate_hz,
        utt_id: w.utt_id.clone(),
    }
}

/// Dispatch on the configured mode; series mode applies ISD then SSI on one
/// continuing stream.
pub fn apply_rawboost(w: &Waveform, cfg: &RawboostConfig, rng: &mut RngStream) -> Waveform {
    match cfg.mode {
        RawboostMode::SsiOnly => apply_ssi(w, cfg, rng).waveform,
        RawboostMode::IsdOnly => apply_isd(w, cfg, rng),
        RawboostMode::SeriesIsdThenSsi => {
            let after_isd = apply_isd(w, cfg, rng);
            apply_ssi(&after_isd, cfg, rng).waveform
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wf(samples: Vec<f64>) -> Waveform {
        Waveform {
            samples,
            sample_rate_hz: 16_000,
            utt_id: "t".into(),
        }
    }

    fn sine(amp: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| amp * (std::f64::consts::TAU * 440.0 * i as f64 / 16_000.0 + 0.37).sin())
            .collect()
    }

    #[test]
    fn ssi_all_zero_passes_through_with_flag() {
        let w = wf(vec![0.0; 1000]);
        let out = apply_ssi(&w, &RawboostConfig::default(), &mut RngStream::new(1));
        assert!(out.degenerate_input);
        assert_eq!(out.waveform.samples, w.samples);
    }

    #[test]
    fn ssi_hits_target_snr() {
        let mut cfg = RawboostConfig::default();
        cfg.ssi.snr_min_db = 10.0;
        cfg.ssi.snr_max_db = 10.0;
        let w = wf(sine(0.1, 16_000));
        let out = apply_ssi(&w, &cfg, &mut RngStream::new(2)).waveform;
        let noise: Vec<f64> = out
            .samples
            .iter()
            .zip(&w.samples)
            .map(|(y, x)| y - x)
            .collect();
        let snr = 10.0 * (power(&w.samples) / power(&noise)).log10();
        assert!((snr - 10.0).abs() < 0.1, "achieved snr {snr}");
    }

    #[test]
    fn ssi_is_deterministic() {
        let w = wf(sine(0.3, 4000));
        let cfg = RawboostConfig::default();
        let a = apply_ssi(&w, &cfg, &mut RngStream::new(7)).waveform;
        let b = apply_ssi(&w, &cfg, &mut RngStream::new(7)).waveform;
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn isd_zero_k_is_identity() {
        let mut cfg = RawboostConfig::default();
        cfg.isd.p_samples_pct = 1.0; // round(0.01 * 10) = 0
        let w = wf(sine(0.4, 10));
        let out = apply_isd(&w, &cfg, &mut RngStream::new(3));
        assert_eq!(out.samples, w.samples);
    }

    #[test]
    fn isd_modifies_exactly_k_positions() {
        let cfg = RawboostConfig::default(); // p = 10%
        let w = wf(sine(0.4, 1000));
        assert!(w.samples.iter().all(|&x| x != 0.0), "test signal must avoid zeros");
        let out = apply_isd(&w, &cfg, &mut RngStream::new(4));
        let changed = out
            .samples
            .iter()
            .zip(&w.samples)
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(changed, 100);
    }

    #[test]
    fn isd_all_zero_is_fixed_point() {
        let w = wf(vec![0.0; 500]);
        let out = apply_isd(&w, &RawboostConfig::default(), &mut RngStream::new(5));
        assert_eq!(out.samples, w.samples);
    }

    #[test]
    fn dispatch_matches_components() {
        let w = wf(sine(0.2, 2000));
        let mut cfg = RawboostConfig::default();

        cfg.mode = RawboostMode::SsiOnly;
        assert_eq!(
            apply_rawboost(&w, &cfg, &mut RngStream::new(9)).samples,
            apply_ssi(&w, &cfg, &mut RngStream::new(9)).waveform.samples
        );

        cfg.mode = RawboostMode::IsdOnly;
        assert_eq!(
            apply_rawboost(&w, &cfg, &mut RngStream::new(9)).samples,
            apply_isd(&w, &cfg, &mut RngStream::new(9)).samples
        );

        cfg.mode = RawboostMode::SeriesIsdThenSsi;
        let series = apply_rawboost(&w, &cfg, &mut RngStream::new(9));
        let mut rng = RngStream::new(9);
        let composed = apply_ssi(&apply_isd(&w, &cfg, &mut rng), &cfg, &mut rng).waveform;
        assert_eq!(series.samples, composed.samples);
    }

    #[test]
    fn output_bounded_and_same_length() {
        let w = wf(sine(0.95, 3000));
        let mut cfg = RawboostConfig::default();
        cfg.ssi.snr_min_db = 0.0;
        cfg.ssi.snr_max_db = 0.0; // loud noise to force clipping
        let out = apply_rawboost(&w, &cfg, &mut RngStream::new(11));
        assert_eq!(out.samples.len(), w.samples.len());
        assert!(out.samples.iter().all(|&x| (-1.0..=1.0).contains(&x)));
    }
}
