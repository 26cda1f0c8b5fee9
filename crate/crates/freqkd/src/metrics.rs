//! Detection metrics: EER and minimum t-DCF.
//!
//! Conventions (fixed so small-sample results are exact and oracle-checkable):
//! higher score means more bona fide; a trial is accepted when its score is
//! `>=` the threshold; thresholds sweep the sorted union of all observed
//! scores plus -inf/+inf sentinels; ties break toward the smaller threshold.
//! EER is reported as `(FAR + FRR) / 2` at the sweep point minimizing
//! `|FAR - FRR|` (no ROC interpolation, which can differ slightly).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio_io::{Manifest, TrialKey};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty score set: both classes need at least one score")]
    EmptyScores,
    #[error("non-finite score for {0:?}")]
    NonFiniteScore(String),
    #[error("invalid t-DCF coefficients: {0}")]
    InvalidCoefficients(String),
    #[error("score line {line_no} is malformed: {line:?}")]
    MalformedLine { line_no: usize, line: String },
    #[error("score file references unknown utterance {0:?}")]
    UnknownUttId(String),
    #[error("manifest trial {0:?} has no score")]
    MissingScore(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Bona fide and spoof score sequences (higher = more bona fide).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub bona: Vec<f64>,
    pub spoof: Vec<f64>,
}

impl ScoreSet {
    pub fn new(bona: Vec<f64>, spoof: Vec<f64>) -> Result<Self, MetricsError> {
        if bona.is_empty() || spoof.is_empty() {
            return Err(MetricsError::EmptyScores);
        }
        if let Some(bad) = bona.iter().chain(&spoof).find(|v| !v.is_finite()) {
            return Err(MetricsError::NonFiniteScore(format!("{bad}")));
        }
        Ok(Self { bona, spoof })
    }
}

/// Reduced affine t-DCF: `c0 + c_miss * P_miss + c_fa * P_fa`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TdcfCoefficients {
    pub c_miss: f64,
    pub c_fa: f64,
    pub c0: f64,
}

impl TdcfCoefficients {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if !(self.c_miss > 0.0) || !(self.c_fa > 0.0) || !(self.c0 >= 0.0) {
            return Err(MetricsError::InvalidCoefficients(format!(
                "need c_miss > 0, c_fa > 0, c0 >= 0; got {self:?}"
            )));
        }
        Ok(())
    }

    /// Plain sum of the two error rates (`c0 = 0`, unit costs).
    pub fn unit() -> Self {
        Self {
            c_miss: 1.0,
            c_fa: 1.0,
            c0: 0.0,
        }
    }

    /// Reduce a tandem cost model to the affine form, given the CM costs,
    /// the spoof prior, and a fixed ASV operating point.
    ///
    /// `p_miss_asv` / `p_fa_asv` are the ASV miss and false-alarm rates on
    /// target/non-target trials; `p_miss_spoof_asv` is the ASV miss rate on
    /// spoof trials (spoofs the ASV already rejects cost the CM nothing).
    #[allow(clippy::too_many_arguments)]
    pub fn from_asv_operating_point(
        p_spoof: f64,
        c_miss_cm: f64,
        c_fa_cm: f64,
        p_miss_asv: f64,
        p_fa_asv: f64,
        p_miss_spoof_asv: f64,
    ) -> Self {
        let p_tar = (1.0 - p_spoof) * 0.99;
        let p_non = (1.0 - p_spoof) * 0.01;
        let c0 = p_tar * c_miss_cm * p_miss_asv + p_non * c_fa_cm * p_fa_asv;
        let c_miss = p_tar * c_miss_cm - c0;
        let c_fa = c_fa_cm * p_spoof * (1.0 - p_miss_spoof_asv);
        Self { c_miss, c_fa, c0 }
    }

    /// ASVspoof-2021-style costs (c_miss=1, c_fa=10, spoof prior 0.05) at a
    /// nominal ASV operating point. The official per-condition ASV error
    /// rates are not embedded, so absolute values are not comparable to
    /// published numbers; override the operating point to calibrate.
    pub fn asvspoof2021_nominal() -> Self {
        Self::from_asv_operating_point(0.05, 1.0, 10.0, 0.02, 0.01, 0.70)
    }
}

/// Candidate thresholds: every observed score plus the two sentinels.
fn sweep_candidates(s: &ScoreSet) -> Vec<f64> {
    let mut t: Vec<f64> = Vec::with_capacity(s.bona.len() + s.spoof.len() + 2);
    t.push(f64::NEG_INFINITY);
    t.extend_from_slice(&s.bona);
    t.extend_from_slice(&s.spoof);
    t.push(f64::INFINITY);
    t.sort_by(|a, b| a.partial_cmp(b).unwrap());
    t.dedup();
    t
}

/// False-acceptance rate (spoof accepted) and false-rejection rate (bona
/// rejected) at a threshold, under the `>=`-accepts convention.
pub fn rates_at(s: &ScoreSet, threshold: f64) -> (f64, f64) {
    let far = s.spoof.iter().filter(|&&v| v >= threshold).count() as f64 / s.spoof.len() as f64;
    let frr = s.bona.iter().filter(|&&v| v < threshold).count() as f64 / s.bona.len() as f64;
    (far, frr)
}

/// Equal error rate and the threshold that attains it.
pub fn eer(s: &ScoreSet) -> Result<(f64, f64), MetricsError> {
    if s.bona.is_empty() || s.spoof.is_empty() {
        return Err(MetricsError::EmptyScores);
    }
    let mut best = (f64::INFINITY, f64::NAN, f64::NAN); // (|far-frr|, eer, thr)
    for &t in &sweep_candidates(s) {
        let (far, frr) = rates_at(s, t);
        let gap = (far - frr).abs();
        if gap < best.0 {
            best = (gap, (far + frr) / 2.0, t);
        }
    }
    Ok((best.1, best.2))
}

/// t-DCF value at one threshold.
pub fn tdcf_at(s: &ScoreSet, c: &TdcfCoefficients, threshold: f64) -> f64 {
    let (p_fa, p_miss) = rates_at(s, threshold);
    c.c0 + c.c_miss * p_miss + c.c_fa * p_fa
}

/// Minimum t-DCF over the threshold sweep, optionally normalized by the
/// cost of the better trivial system, `c0 + min(c_miss, c_fa)`.
pub fn min_tdcf(
    s: &ScoreSet,
    c: &TdcfCoefficients,
    normalize: bool,
) -> Result<(f64, f64), MetricsError> {
    if s.bona.is_empty() || s.spoof.is_empty() {
        return Err(MetricsError::EmptyScores);
    }
    c.validate()?;
    let mut best = (f64::INFINITY, f64::NAN); // (cost, thr)
    for &t in &sweep_candidates(s) {
        let cost = tdcf_at(s, c, t);
        if cost < best.0 {
            best = (cost, t);
        }
    }
    let value = if normalize {
        best.0 / (c.c0 + c.c_miss.min(c.c_fa))
    } else {
        best.0
    };
    Ok((value, best.1))
}

/// Parsed metric results, serialized as the evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub eer: f64,
    pub eer_threshold: f64,
    pub min_tdcf: f64,
    pub tdcf_threshold: f64,
    pub tdcf_normalized: bool,
    pub n_bona: usize,
    pub n_spoof: usize,
}

/// Compute the full report for a score set.
pub fn evaluate(
    s: &ScoreSet,
    c: &TdcfCoefficients,
    normalize: bool,
) -> Result<MetricReport, MetricsError> {
    let (eer_v, eer_t) = eer(s)?;
    let (t_v, t_t) = min_tdcf(s, c, normalize)?;
    Ok(MetricReport {
        eer: eer_v,
        eer_threshold: eer_t,
        min_tdcf: t_v,
        tdcf_threshold: t_t,
        tdcf_normalized: normalize,
        n_bona: s.bona.len(),
        n_spoof: s.spoof.len(),
    })
}

/// Read a score file: one `utt_id score` pair per non-empty line.
pub fn read_score_file(path: &Path) -> Result<Vec<(String, f64)>, MetricsError> {
    let text = fs::read_to_string(path).map_err(|e| MetricsError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let malformed = || MetricsError::MalformedLine {
            line_no: idx + 1,
            line: line.to_string(),
        };
        let utt = fields.next().ok_or_else(malformed)?;
        let score: f64 = fields
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(malformed)?;
        if fields.next().is_some() {
            return Err(malformed());
        }
        out.push((utt.to_string(), score));
    }
    Ok(out)
}

/// Write scores in the same `utt_id score` format, one line per trial.
pub fn write_score_file(path: &Path, scores: &[(String, f64)]) -> Result<(), MetricsError> {
    let mut f = fs::File::create(path).map_err(|e| MetricsError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    for (utt, score) in scores {
        writeln!(f, "{utt} {score}").map_err(|e| MetricsError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    }
    Ok(())
}

/// Partition scores into bona/spoof sequences using the manifest key.
///
/// Every score must belong to a manifest trial and every manifest trial
/// must be scored.
pub fn partition_scores(
    scores: &[(String, f64)],
    manifest: &Manifest,
) -> Result<ScoreSet, MetricsError> {
    let mut by_id: std::collections::HashMap<&str, f64> = std::collections::HashMap::new();
    for (utt, score) in scores {
        if !score.is_finite() {
            return Err(MetricsError::NonFiniteScore(utt.clone()));
        }
        by_id.insert(utt.as_str(), *score);
    }
    for (utt, _) in scores {
        if !manifest.records.iter().any(|r| r.utt_id == *utt) {
            return Err(MetricsError::UnknownUttId(utt.clone()));
        }
    }
    let mut bona = Vec::new();
    let mut spoof = Vec::new();
    for rec in &manifest.records {
        let score = by_id
            .get(rec.utt_id.as_str())
            .copied()
            .ok_or_else(|| MetricsError::MissingScore(rec.utt_id.clone()))?;
        match rec.key {
            TrialKey::Bonafide => bona.push(score),
            TrialKey::Spoof => spoof.push(score),
        }
    }
    ScoreSet::new(bona, spoof)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio_io::TrialRecord;
    use proptest::prelude::*;

    fn set(bona: &[f64], spoof: &[f64]) -> ScoreSet {
        ScoreSet::new(bona.to_vec(), spoof.to_vec()).unwrap()
    }

    /// Exhaustive O(n^2) oracle over the same candidate set.
    fn eer_oracle(s: &ScoreSet) -> (f64, f64) {
        let mut cands = vec![f64::NEG_INFINITY, f64::INFINITY];
        cands.extend_from_slice(&s.bona);
        cands.extend_from_slice(&s.spoof);
        cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cands.dedup();
        let mut best = (f64::INFINITY, f64::NAN, f64::NAN);
        for &t in &cands {
            let far = s.spoof.iter().filter(|&&v| v >= t).count() as f64 / s.spoof.len() as f64;
            let frr = s.bona.iter().filter(|&&v| v < t).count() as f64 / s.bona.len() as f64;
            if (far - frr).abs() < best.0 {
                best = ((far - frr).abs(), (far + frr) / 2.0, t);
            }
        }
        (best.1, best.2)
    }

    #[test]
    fn perfect_separation_and_inversion() {
        let (e, _) = eer(&set(&[0.9, 0.8, 0.7], &[0.3, 0.2, 0.1])).unwrap();
        assert_eq!(e, 0.0);
        let (e, _) = eer(&set(&[0.1], &[0.9])).unwrap();
        assert_eq!(e, 1.0);
    }

    #[test]
    fn half_overlap_case() {
        let s = set(&[0.8, 0.4], &[0.6, 0.2]);
        let (e, t) = eer(&s).unwrap();
        assert_eq!(e, 0.5);
        assert!(t > 0.4 && t <= 0.6, "threshold {t}");
        let (oe, ot) = eer_oracle(&s);
        assert_eq!(e, oe);
        assert_eq!(t, ot);
    }

    #[test]
    fn tdcf_perfect_separation_is_zero() {
        let s = set(&[0.9, 0.8], &[0.1, 0.2]);
        let c = TdcfCoefficients::unit();
        let (v, _) = min_tdcf(&s, &c, false).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn tdcf_unit_costs_equal_min_rate_sum() {
        let s = set(&[0.8, 0.4, 0.3], &[0.6, 0.2, 0.5]);
        let c = TdcfCoefficients::unit();
        let (v, _) = min_tdcf(&s, &c, false).unwrap();
        // Oracle: min over candidates of FAR + FRR.
        let mut cands = vec![f64::NEG_INFINITY, f64::INFINITY];
        cands.extend_from_slice(&s.bona);
        cands.extend_from_slice(&s.spoof);
        let best = cands
            .iter()
            .map(|&t| {
                let (far, frr) = rates_at(&s, t);
                far + frr
            })
            .fold(f64::INFINITY, f64::min);
        assert_eq!(v, best);
    }

    #[test]
    fn tdcf_at_accept_all_threshold() {
        let s = set(&[0.5, 0.6], &[0.4, 0.3]);
        let c = TdcfCoefficients {
            c_miss: 2.0,
            c_fa: 3.0,
            c0: 0.25,
        };
        // Accept everything: P_miss = 0, P_fa = 1.
        assert_eq!(tdcf_at(&s, &c, f64::NEG_INFINITY), c.c0 + c.c_fa);
    }

    #[test]
    fn tdcf_minimality_via_resweep() {
        let s = set(&[0.8, 0.1, 0.6, 0.55], &[0.5, 0.2, 0.7]);
        let c = TdcfCoefficients::asvspoof2021_nominal();
        c.validate().unwrap();
        let (v, _) = min_tdcf(&s, &c, false).unwrap();
        for &t in &sweep_candidates(&s) {
            assert!(v <= tdcf_at(&s, &c, t) + 1e-15);
        }
    }

    #[test]
    fn tdcf_rejects_bad_coefficients() {
        let s = set(&[0.5], &[0.4]);
        let bad = TdcfCoefficients {
            c_miss: 0.0,
            c_fa: 1.0,
            c0: 0.0,
        };
        assert!(matches!(
            min_tdcf(&s, &bad, false),
            Err(MetricsError::InvalidCoefficients(_))
        ));
    }

    #[test]
    fn empty_scores_rejected() {
        assert!(matches!(
            ScoreSet::new(vec![], vec![0.1]),
            Err(MetricsError::EmptyScores)
        ));
    }

    fn manifest(records: &[(&str, TrialKey)]) -> Manifest {
        Manifest {
            records: records
                .iter()
                .map(|(id, key)| TrialRecord {
                    utt_id: id.to_string(),
                    key: *key,
                    attack_tag: None,
                })
                .collect(),
            audio_root: ".".into(),
        }
    }

    #[test]
    fn score_partition_counts() {
        let m = manifest(&[
            ("b1", TrialKey::Bonafide),
            ("b2", TrialKey::Bonafide),
            ("s1", TrialKey::Spoof),
            ("s2", TrialKey::Spoof),
            ("s3", TrialKey::Spoof),
        ]);
        let scores: Vec<(String, f64)> = ["b1", "b2", "s1", "s2", "s3"]
            .iter()
            .enumerate()
            .map(|(i, id)| (id.to_string(), i as f64 / 10.0))
            .collect();
        let set = partition_scores(&scores, &m).unwrap();
        assert_eq!(set.bona.len(), 2);
        assert_eq!(set.spoof.len(), 3);
    }

    #[test]
    fn score_partition_errors() {
        let m = manifest(&[("b1", TrialKey::Bonafide), ("s1", TrialKey::Spoof)]);
        let unknown = vec![("zz".to_string(), 0.5), ("b1".to_string(), 0.1), ("s1".to_string(), 0.2)];
        assert!(matches!(
            partition_scores(&unknown, &m),
            Err(MetricsError::UnknownUttId(id)) if id == "zz"
        ));
        let missing = vec![("b1".to_string(), 0.5)];
        assert!(matches!(
            partition_scores(&missing, &m),
            Err(MetricsError::MissingScore(id)) if id == "s1"
        ));
    }

    #[test]
    fn score_file_round_trip_and_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.txt");
        let scores = vec![
            ("a".to_string(), 0.125),
            ("b".to_string(), -3.5e-2),
            ("c".to_string(), 7.0),
        ];
        write_score_file(&path, &scores).unwrap();
        assert_eq!(read_score_file(&path).unwrap(), scores);

        fs::write(&path, "a 0.5\nbroken\n").unwrap();
        assert!(matches!(
            read_score_file(&path),
            Err(MetricsError::MalformedLine { line_no: 2, .. })
        ));
    }

    proptest! {
        #[test]
        fn eer_matches_oracle(
            bona in proptest::collection::vec(-5.0f64..5.0, 1..40),
            spoof in proptest::collection::vec(-5.0f64..5.0, 1..40),
        ) {
            let s = ScoreSet::new(bona, spoof).unwrap();
            let (e, t) = eer(&s).unwrap();
            let (oe, ot) = eer_oracle(&s);
            prop_assert_eq!(e, oe);
            prop_assert_eq!(t, ot);
        }

        #[test]
        fn eer_invariant_under_increasing_transform(
            bona in proptest::collection::vec(-2.0f64..2.0, 1..30),
            spoof in proptest::collection::vec(-2.0f64..2.0, 1..30),
        ) {
            let s = ScoreSet::new(bona.clone(), spoof.clone()).unwrap();
            let (e1, _) = eer(&s).unwrap();
            // Strictly increasing transform.
            let f = |v: f64| (v * 0.7).exp() + 0.1 * v;
            let s2 = ScoreSet::new(
                bona.iter().map(|&v| f(v)).collect(),
                spoof.iter().map(|&v| f(v)).collect(),
            ).unwrap();
            let (e2, _) = eer(&s2).unwrap();
            prop_assert!((e1 - e2).abs() < 1e-12);
        }

        #[test]
        fn eer_symmetry_under_role_swap_and_negation(
            bona in proptest::collection::vec(-2.0f64..2.0, 1..30),
            spoof in proptest::collection::vec(-2.0f64..2.0, 1..30),
        ) {
            let s = ScoreSet::new(bona.clone(), spoof.clone()).unwrap();
            let (e1, _) = eer(&s).unwrap();
            let swapped = ScoreSet::new(
                spoof.iter().map(|&v| -v).collect(),
                bona.iter().map(|&v| -v).collect(),
            ).unwrap();
            let (e2, _) = eer(&swapped).unwrap();
            // The >=/<-tie convention can shift the operating point by one
            // sample when scores coincide, so allow one count of slack.
            let slack = 0.5 / bona.len().min(spoof.len()) as f64 + 1e-12;
            prop_assert!((e1 - e2).abs() <= slack, "e1={e1} e2={e2}");
        }
    }
}
