//! Batch frequency mixing.
//!
//! One gate draw per batch decides whether to mix. When it fires, a shared
//! band of rows `(f0, f0 + span)` is cut out of every feature map in the
//! batch, shuffled by a uniform random permutation, and pasted back. Labels
//! are never touched: the mixed maps only ever feed the frozen teacher.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureMap, SUBBAND_BINS};
use crate::rng::RngStream;

#[derive(Debug, Error)]
pub enum FreqmixError {
    #[error("batch of {0} is too small to mix (need >= 2)")]
    BatchTooSmall(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FreqmixConfig {
    /// Maximum band span in rows of the 45-row map.
    pub f_max: usize,
    /// Mix only when a uniform draw exceeds this threshold.
    pub gate_threshold: f64,
    /// Redraw the permutation until it has no fixed points.
    pub derangement: bool,
}

impl Default for FreqmixConfig {
    fn default() -> Self {
        Self {
            f_max: 10,
            gate_threshold: 0.5,
            derangement: false,
        }
    }
}

impl FreqmixConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(1..=SUBBAND_BINS).contains(&self.f_max) {
            return Err(format!("f_max must be in 1..={SUBBAND_BINS}"));
        }
        if !(0.0..=1.0).contains(&self.gate_threshold) {
            return Err("gate_threshold must be in [0, 1]".into());
        }
        Ok(())
    }
}

/// A concrete band and shuffle for one batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BandSelection {
    /// First row of the band.
    pub f0: usize,
    /// Number of rows in the band.
    pub span: usize,
    /// `output[i]` takes the band of `input[permutation[i]]`.
    pub permutation: Vec<usize>,
}

/// One gate draw: true iff a uniform value in `(0, 1)` exceeds the
/// threshold (exact zeros are redrawn, ties count as "no mix").
pub fn draw_gate(rng: &mut RngStream, cfg: &FreqmixConfig) -> bool {
    rng.uniform_open() > cfg.gate_threshold
}

/// Draw a band (span uniform in `1..=f_max`, start uniform over valid
/// positions) and a uniform permutation of the batch.
pub fn select_band(
    rng: &mut RngStream,
    cfg: &FreqmixConfig,
    batch_size: usize,
) -> Result<BandSelection, FreqmixError> {
    if batch_size < 2 {
        return Err(FreqmixError::BatchTooSmall(batch_size));
    }
    let span = rng.range_usize(1, cfg.f_max);
    let f0 = rng.range_usize(0, SUBBAND_BINS - span);
    let mut permutation = rng.permutation(batch_size);
    if cfg.derangement {
        while permutation.iter().enumerate().any(|(i, &p)| i == p) {
            permutation = rng.permutation(batch_size);
        }
    }
    Ok(BandSelection {
        f0,
        span,
        permutation,
    })
}

/// Cut the selected band from every map and paste it back in shuffled
/// order. Rows outside the band are copied through untouched.
pub fn apply_freqmix(
    batch: &[FeatureMap],
    sel: &BandSelection,
) -> Result<Vec<FeatureMap>, FreqmixError> {
    if sel.permutation.len() != batch.len() {
        return Err(FreqmixError::ShapeMismatch(format!(
            "permutation covers {} items, batch has {}",
            sel.permutation.len(),
            batch.len()
        )));
    }
    let mut covered = vec![false; batch.len()];
    for &p in &sel.permutation {
        if p >= batch.len() || covered[p] {
            return Err(FreqmixError::ShapeMismatch(
                "permutation is not a bijection on batch indices".into(),
            ));
        }
        covered[p] = true;
    }
    for map in batch {
        let (bins, _) = map.values.dim();
        if bins < sel.f0 + sel.span {
            return Err(FreqmixError::ShapeMismatch(format!(
                "map {} has {} rows, band needs {}",
                map.utt_id,
                bins,
                sel.f0 + sel.span
            )));
        }
        if map.values.dim() != batch[0].values.dim() {
            return Err(FreqmixError::ShapeMismatch(
                "maps in batch differ in shape".into(),
            ));
        }
    }

    let out = batch
        .iter()
        .enumerate()
        .map(|(i, map)| {
            let mut values = map.values.clone();
            let src = &batch[sel.permutation[i]].values;
            values
                .slice_mut(ndarray::s![sel.f0..sel.f0 + sel.span, ..])
                .assign(&src.slice(ndarray::s![sel.f0..sel.f0 + sel.span, ..]));
            FeatureMap {
                values,
                utt_id: map.utt_id.clone(),
            }
        })
        .collect();
    Ok(out)
}

/// Gate, select and apply in one call. Batches of fewer than two maps and
/// un-gated batches pass through unchanged.
pub fn freqmix_batch(
    batch: &[FeatureMap],
    cfg: &FreqmixConfig,
    rng: &mut RngStream,
) -> Result<Vec<FeatureMap>, FreqmixError> {
    let gate = draw_gate(rng, cfg);
    if !gate || batch.len() < 2 {
        return Ok(batch.to_vec());
    }
    let sel = select_band(rng, cfg, batch.len())?;
    apply_freqmix(batch, &sel)
}
