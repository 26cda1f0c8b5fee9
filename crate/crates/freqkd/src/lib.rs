//! Fake-speech detection with frequency-band mixing knowledge distillation.
//!
//! The crate covers the full desk-scale pipeline: WAV/protocol ingestion,
//! Rawboost time-domain augmentation, F0 sub-band log-power features, batch
//! frequency mixing, a small multi-scale residual classifier with exact
//! analytic gradients, multi-level feature distillation from a frozen
//! teacher, EER / min t-DCF evaluation, and a synthetic corpus generator so
//! everything runs end to end without external data.

pub mod audio_io;
pub mod distill;
pub mod features;
pub mod freqmix;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rawboost;
pub mod rng;
pub mod synthetic;
pub mod tensor;

pub use audio_io::{Manifest, TrialKey, TrialRecord, Waveform};
pub use features::{FeatureMap, Spectrogram, StftConfig};
pub use rng::RngStream;
