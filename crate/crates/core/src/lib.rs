//! Quality-aware audio-visual fusion for frame-level "talking to me"
//! detection in egocentric video.
//!
//! The crate holds the whole pipeline:
//!
//! ```text
//! synth -> quality -> { audio branch, vision branch, AV-joint } -> fusion -> eval
//! ```
//!
//! * [`types`]: segments, frames, windows, score files and the dataset manifest
//! * [`synth`]: deterministic synthetic dataset generator
//! * [`quality`]: landmark-confidence face quality, filtering, quantization
//! * [`audiofeat`]: log-mel front end and audio augmentations
//! * [`audio_branch`], [`vision_branch`], [`av_joint`]: the three models
//! * [`fusion`]: quality-weighted late fusion and moving-average smoothing
//! * [`eval`]: accuracy and average precision
//! * [`pipeline`]: config-driven orchestration used by the `quavf` binary

pub mod audio_branch;
pub mod audiofeat;
pub mod av_joint;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod nn;
pub mod pipeline;
pub mod quality;
pub mod synth;
pub mod types;
pub mod vision_branch;

pub use error::{Error, Result};
