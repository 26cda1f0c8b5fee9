//! Audio and protocol ingestion.
//!
//! Accepts exactly the corpus convention the rest of the pipeline is built
//! around: RIFF/PCM ("WAV"), 16-bit signed little-endian, mono, 16 kHz, and
//! plain-text trial protocols with one whitespace-separated trial per line.
//! No resampling, no multi-channel support.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

/// The only sample rate the pipeline ingests.
pub const CANONICAL_SAMPLE_RATE: u32 = 16_000;

/// Fixed-point scale for 16-bit PCM; maps the most negative code to -1.0.
const PCM_SCALE: f64 = 32_768.0;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("malformed container in {path}: {reason}")]
    MalformedContainer { path: PathBuf, reason: String },
    #[error(
        "unsupported format in {path}: {channels} ch / {bits} bit / {rate} Hz \
         (need 1 ch / 16 bit / 16000 Hz PCM)"
    )]
    UnsupportedFormat {
        path: PathBuf,
        channels: u16,
        bits: u16,
        rate: u32,
    },
    #[error("empty audio: {path} contains zero samples")]
    EmptyAudio { path: PathBuf },
    #[error("protocol line {line_no}: unknown key token {token:?}")]
    UnknownKeyToken { line_no: usize, token: String },
    #[error("protocol line {line_no}: missing column {col}")]
    MalformedLine { line_no: usize, col: usize },
    #[error("duplicate utterance id {0:?} in protocol")]
    DuplicateUttId(String),
    #[error("protocol file {0} has no trials")]
    EmptyProtocol(PathBuf),
    #[error("audio for utterance {utt_id:?} not readable at {path}")]
    MissingAudio { utt_id: String, path: PathBuf },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl AudioError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        AudioError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn malformed(path: &Path, reason: impl Into<String>) -> Self {
        AudioError::MalformedContainer {
            path: path.to_path_buf(),
            reason: reason.into(),
        }
    }
}

/// Mono waveform with amplitudes in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
    pub utt_id: String,
}

impl Waveform {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

/// Ground-truth class of a trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrialKey {
    Bonafide,
    Spoof,
}

impl TrialKey {
    pub fn from_token(token: &str) -> Option<TrialKey> {
        match token {
            "bonafide" => Some(TrialKey::Bonafide),
            "spoof" => Some(TrialKey::Spoof),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrialKey::Bonafide => "bonafide",
            TrialKey::Spoof => "spoof",
        }
    }

    /// Class index used by the model head (bona fide first).
    pub fn class_index(self) -> usize {
        match self {
            TrialKey::Bonafide => 0,
            TrialKey::Spoof => 1,
        }
    }
}

/// One protocol line: utterance id, key, optional attack tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrialRecord {
    pub utt_id: String,
    pub key: TrialKey,
    pub attack_tag: Option<String>,
}

/// Column layout of a protocol file (0-based, whitespace-separated).
///
/// Defaults follow the ASVspoof CM convention: utterance id in column 1,
/// key in the last column.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub utt_id_col: usize,
    /// `None` means "last column".
    pub key_col: Option<usize>,
    pub attack_col: Option<usize>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            utt_id_col: 1,
            key_col: None,
            attack_col: None,
        }
    }
}

/// Parsed protocol plus the directory its audio lives in.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub records: Vec<TrialRecord>,
    pub audio_root: PathBuf,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn audio_path(&self, utt_id: &str) -> PathBuf {
        self.audio_root.join(format!("{utt_id}.wav"))
    }

    pub fn count(&self, key: TrialKey) -> usize {
        self.records.iter().filter(|r| r.key == key).count()
    }

    /// Check that every record resolves to a readable audio file.
    pub fn verify_audio(&self) -> Result<(), AudioError> {
        for rec in &self.records {
            let path = self.audio_path(&rec.utt_id);
            if fs::metadata(&path).map(|m| m.is_file()).unwrap_or(false) {
                continue;
            }
            return Err(AudioError::MissingAudio {
                utt_id: rec.utt_id.clone(),
                path,
            });
        }
        Ok(())
    }
}

fn read_u16(bytes: &[u8], at: usize) -> Option<u16> {
    bytes.get(at..at + 2).map(|b| u16::from_le_bytes([b[0], b[1]]))
}

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

/// Load a 16 kHz / 16-bit / mono PCM WAV file.
///
/// Amplitudes are the raw codes divided by 32768, so they land in
/// `[-1, 1)`. The utterance id is the file stem.
pub fn load_waveform(path: &Path) -> Result<Waveform, AudioError> {
    let bytes = fs::read(path).map_err(|e| AudioError::io(path, e))?;
    decode_wav(path, &bytes)
}

fn decode_wav(path: &Path, bytes: &[u8]) -> Result<Waveform, AudioError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::malformed(path, "missing RIFF/WAVE header"));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    let mut pos = 12usize;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = read_u32(bytes, pos + 4)
            .ok_or_else(|| AudioError::malformed(path, "truncated chunk header"))? as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| AudioError::malformed(path, "chunk overruns file"))?;
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(AudioError::malformed(path, "fmt chunk too small"));
                }
                let format = read_u16(bytes, body_start).unwrap();
                let channels = read_u16(bytes, body_start + 2).unwrap();
                let rate = read_u32(bytes, body_start + 4).unwrap();
                let bits = read_u16(bytes, body_start + 14).unwrap();
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some(&bytes[body_start..body_end]),
            _ => {} // skip unknown chunks (LIST, fact, ...)
        }
        // Chunk bodies are word-aligned.
        pos = body_end + (size & 1);
    }

    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| AudioError::malformed(path, "no fmt chunk"))?;
    let data = data.ok_or_else(|| AudioError::malformed(path, "no data chunk"))?;

    if format != 1 || channels != 1 || bits != 16 || rate != CANONICAL_SAMPLE_RATE {
        return Err(AudioError::UnsupportedFormat {
            path: path.to_path_buf(),
            channels,
            bits,
            rate,
        });
    }
    if data.is_empty() {
        return Err(AudioError::EmptyAudio {
            path: path.to_path_buf(),
        });
    }
    if data.len() % 2 != 0 {
        return Err(AudioError::malformed(path, "odd data chunk length"));
    }

    let samples: Vec<f64> = data
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]) as f64 / PCM_SCALE)
        .collect();

    let utt_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();

    Ok(Waveform {
        samples,
        sample_rate_hz: rate,
        utt_id,
    })
}

/// Write a waveform as canonical 16-bit mono PCM.
///
/// Amplitudes are scaled by 32768, rounded to nearest, and clamped to the
/// i16 range (so +1.0 maps to 32767).
pub fn write_waveform(w: &Waveform, path: &Path) -> Result<(), AudioError> {
    let n = w.samples.len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&w.sample_rate_hz.to_le_bytes());
    out.extend_from_slice(&(w.sample_rate_hz * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &a in &w.samples {
        let code = (a * PCM_SCALE).round().clamp(-32_768.0, 32_767.0) as i16;
        out.extend_from_slice(&code.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| AudioError::io(path, e))?;
    f.write_all(&out).map_err(|e| AudioError::io(path, e))
}

/// Parse an ASVspoof-style protocol file into a manifest.
///
/// One trial per non-empty line; line order is preserved.
pub fn parse_protocol(
    path: &Path,
    audio_root: &Path,
    cfg: &ProtocolConfig,
) -> Result<Manifest, AudioError> {
    let text = fs::read_to_string(path).map_err(|e| AudioError::io(path, e))?;
    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let get = |col: usize| -> Result<&str, AudioError> {
            fields
                .get(col)
                .copied()
                .ok_or(AudioError::MalformedLine { line_no, col })
        };
        let utt_id = get(cfg.utt_id_col)?.to_string();
        let key_col = cfg.key_col.unwrap_or(fields.len() - 1);
        let key_token = get(key_col)?;
        let key = TrialKey::from_token(key_token).ok_or_else(|| AudioError::UnknownKeyToken {
            line_no,
            token: key_token.to_string(),
        })?;
        let attack_tag = match cfg.attack_col {
            Some(col) => {
                let tag = get(col)?;
                (tag != "-").then(|| tag.to_string())
            }
            None => None,
        };
        if !seen.insert(utt_id.clone()) {
            return Err(AudioError::DuplicateUttId(utt_id));
        }
        records.push(TrialRecord {
            utt_id,
            key,
            attack_tag,
        });
    }
    if records.is_empty() {
        return Err(AudioError::EmptyProtocol(path.to_path_buf()));
    }
    Ok(Manifest {
        records,
        audio_root: audio_root.to_path_buf(),
    })
}

/// Force a waveform to exactly `target_samples` samples: truncate when too
/// long, tile from the start (repeat) when too short.
pub fn fix_duration(w: &Waveform, target_samples: usize) -> Waveform {
    assert!(target_samples > 0, "target_samples must be positive");
    let mut samples = Vec::with_capacity(target_samples);
    while samples.len() < target_samples {
        let need = target_samples - samples.len();
        let take = need.min(w.samples.len());
        samples.extend_from_slice(&w.samples[..take]);
    }
    Waveform {
        samples,
        sample_rate_hz: w.sample_rate_hz,
        utt_id: w.utt_id.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn wav_bytes(samples: &[i16], channels: u16, rate: u32, bits: u16) -> Vec<u8> {
        let data_len = (samples.len() * 2) as u32;
        let mut out = Vec::new();
        out.extend_from_slice(b"RIFF");
        out.extend_from_slice(&(36 + data_len).to_le_bytes());
        out.extend_from_slice(b"WAVE");
        out.extend_from_slice(b"fmt ");
        out.extend_from_slice(&16u32.to_le_bytes());
        out.extend_from_slice(&1u16.to_le_bytes());
        out.extend_from_slice(&channels.to_le_bytes());
        out.extend_from_slice(&rate.to_le_bytes());
        out.extend_from_slice(&(rate * 2).to_le_bytes());
        out.extend_from_slice(&2u16.to_le_bytes());
        out.extend_from_slice(&bits.to_le_bytes());
        out.extend_from_slice(b"data");
        out.extend_from_slice(&data_len.to_le_bytes());
        for s in samples {
            out.extend_from_slice(&s.to_le_bytes());
        }
        out
    }

    fn write_tmp(bytes: &[u8], name: &str) -> PathBuf {
        let dir = tempfile::tempdir().unwrap().keep();
        let path = dir.join(name);
        fs::write(&path, bytes).unwrap();
        path
    }

    #[test]
    fn fixed_point_scaling() {
        let path = write_tmp(&wav_bytes(&[0, 16_384, -32_768], 1, 16_000, 16), "u1.wav");
        let w = load_waveform(&path).unwrap();
        assert_eq!(w.samples, vec![0.0, 0.5, -1.0]);
        assert_eq!(w.utt_id, "u1");
        assert_eq!(w.sample_rate_hz, 16_000);
    }

    #[test]
    fn rejects_stereo() {
        let path = write_tmp(&wav_bytes(&[0, 0], 2, 16_000, 16), "st.wav");
        assert!(matches!(
            load_waveform(&path),
            Err(AudioError::UnsupportedFormat { channels: 2, .. })
        ));
    }

    #[test]
    fn rejects_wrong_rate_and_depth() {
        let p8k = write_tmp(&wav_bytes(&[1], 1, 8_000, 16), "r.wav");
        assert!(matches!(
            load_waveform(&p8k),
            Err(AudioError::UnsupportedFormat { rate: 8_000, .. })
        ));
        let p8b = write_tmp(&wav_bytes(&[1], 1, 16_000, 8), "b.wav");
        assert!(matches!(
            load_waveform(&p8b),
            Err(AudioError::UnsupportedFormat { bits: 8, .. })
        ));
    }

    #[test]
    fn rejects_empty_audio() {
        let path = write_tmp(&wav_bytes(&[], 1, 16_000, 16), "e.wav");
        assert!(matches!(load_waveform(&path), Err(AudioError::EmptyAudio { .. })));
    }

    #[test]
    fn rejects_garbage_header() {
        let path = write_tmp(b"not a wav at all", "g.wav");
        assert!(matches!(
            load_waveform(&path),
            Err(AudioError::MalformedContainer { .. })
        ));
    }

    #[test]
    fn sample_count_matches_independent_byte_reader() {
        let samples: Vec<i16> = (0..64_600).map(|i| (i % 251) as i16).collect();
        let bytes = wav_bytes(&samples, 1, 16_000, 16);
        let path = write_tmp(&bytes, "long.wav");

        // Independent count: locate the data chunk by scanning raw bytes.
        let pos = bytes.windows(4).position(|w| w == b"data").unwrap();
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap());
        let expected = (size / 2) as usize;
        assert_eq!(expected, 64_600);

        let w = load_waveform(&path).unwrap();
        assert_eq!(w.len(), expected);
        assert!((w.duration_s() - 4.0375).abs() < 1e-12);
    }

    #[test]
    fn skips_extra_chunks() {
        let mut bytes = wav_bytes(&[100, -100], 1, 16_000, 16);
        // Inject a LIST chunk between header and fmt by rebuilding.
        let tail = bytes.split_off(12);
        bytes.extend_from_slice(b"LIST");
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(b"INFO");
        bytes.extend_from_slice(&tail);
        let riff_len = (bytes.len() - 8) as u32;
        bytes[4..8].copy_from_slice(&riff_len.to_le_bytes());
        let path = write_tmp(&bytes, "list.wav");
        let w = load_waveform(&path).unwrap();
        assert_eq!(w.len(), 2);
    }

    #[test]
    fn protocol_field_extraction() {
        let path = write_tmp(b"LA_0009 LA_E_123 - - bonafide\n", "p.txt");
        let cfg = ProtocolConfig {
            utt_id_col: 1,
            key_col: Some(4),
            attack_col: None,
        };
        let m = parse_protocol(&path, Path::new("."), &cfg).unwrap();
        assert_eq!(m.records.len(), 1);
        assert_eq!(m.records[0].utt_id, "LA_E_123");
        assert_eq!(m.records[0].key, TrialKey::Bonafide);
    }

    #[test]
    fn protocol_rejects_unknown_key() {
        let path = write_tmp(b"spk utt1 - - genuine\n", "p2.txt");
        assert!(matches!(
            parse_protocol(&path, Path::new("."), &ProtocolConfig::default()),
            Err(AudioError::UnknownKeyToken { token, .. }) if token == "genuine"
        ));
    }

    #[test]
    fn protocol_skips_blank_lines_and_preserves_order() {
        let path = write_tmp(b"s a - - bonafide\n\ns b - - spoof\n", "p3.txt");
        let m = parse_protocol(&path, Path::new("."), &ProtocolConfig::default()).unwrap();
        // Independent count of non-empty lines.
        let text = fs::read_to_string(&path).unwrap();
        let non_empty = text.lines().filter(|l| !l.trim().is_empty()).count();
        assert_eq!(m.records.len(), non_empty);
        assert_eq!(m.records[0].utt_id, "a");
        assert_eq!(m.records[1].utt_id, "b");
    }

    #[test]
    fn protocol_rejects_duplicates_and_empty() {
        let dup = write_tmp(b"s a - - spoof\ns a - - spoof\n", "d.txt");
        assert!(matches!(
            parse_protocol(&dup, Path::new("."), &ProtocolConfig::default()),
            Err(AudioError::DuplicateUttId(id)) if id == "a"
        ));
        let empty = write_tmp(b"\n \n", "e.txt");
        assert!(matches!(
            parse_protocol(&empty, Path::new("."), &ProtocolConfig::default()),
            Err(AudioError::EmptyProtocol(_))
        ));
    }

    #[test]
    fn protocol_attack_tag() {
        let path = write_tmp(b"s a - A07 spoof\ns b - - bonafide\n", "a.txt");
        let cfg = ProtocolConfig {
            attack_col: Some(3),
            ..ProtocolConfig::default()
        };
        let m = parse_protocol(&path, Path::new("."), &cfg).unwrap();
        assert_eq!(m.records[0].attack_tag.as_deref(), Some("A07"));
        assert_eq!(m.records[1].attack_tag, None);
    }

    fn wf(samples: Vec<f64>) -> Waveform {
        Waveform {
            samples,
            sample_rate_hz: 16_000,
            utt_id: "t".into(),
        }
    }

    #[test]
    fn fix_duration_truncates_tiles_and_is_identity() {
        let w = wf((0..10).map(|i| i as f64 / 100.0).collect());
        assert_eq!(fix_duration(&w, 4).samples, w.samples[..4]);

        let abc = wf(vec![0.1, 0.2, 0.3]);
        assert_eq!(
            fix_duration(&abc, 7).samples,
            vec![0.1, 0.2, 0.3, 0.1, 0.2, 0.3, 0.1]
        );

        let long = wf(vec![0.5; 64_600]);
        assert_eq!(fix_duration(&long, 64_600).samples, long.samples);
    }

    proptest! {
        #[test]
        fn fix_duration_always_exact_length(
            len in 1usize..200,
            target in 1usize..500,
        ) {
            let w = wf((0..len).map(|i| (i as f64).sin() * 0.5).collect());
            prop_assert_eq!(fix_duration(&w, target).samples.len(), target);
        }

        #[test]
        fn pcm_round_trip_exact_on_grid(codes in proptest::collection::vec(-32_768i32..=32_767, 1..64)) {
            let w = wf(codes.iter().map(|&c| c as f64 / 32_768.0).collect());
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("rt.wav");
            write_waveform(&w, &path).unwrap();
            let back = load_waveform(&path).unwrap();
            prop_assert_eq!(back.samples, w.samples);
        }
    }
}
