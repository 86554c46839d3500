//! Quality-aware late fusion and moving-average post-processing.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{format_sig9, ScoreTrack};

/// Vision weight is the face quality, audio gets the rest.
///
/// The quality is snapped to multiples of 2^-53 first. On that grid
/// `1 - q` is exact, so `quavf_fuse(v, a, q) == quavf_fuse(a, v, 1 - q)`
/// holds bit for bit.
pub fn quavf_fuse(vision: f64, audio: f64, quality: f64) -> Result<f64> {
    for (name, v) in [("vision", vision), ("audio", audio), ("quality", quality)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Validation(format!("{name} score {v} outside [0, 1]")));
        }
    }
    const GRID: f64 = (1u64 << 53) as f64;
    let q = (quality * GRID).round_ties_even() / GRID;
    Ok(q * vision + (1.0 - q) * audio)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedTrack {
    pub segment_id: String,
    pub scores: Vec<f64>,
    /// Fusion weight given to the vision score at each frame.
    pub weights: Vec<f64>,
}

impl FusedTrack {
    pub fn score_track(&self) -> ScoreTrack {
        ScoreTrack {
            segment_id: self.segment_id.clone(),
            scores: self.scores.clone(),
        }
    }
}

pub fn fuse_tracks(vision: &ScoreTrack, audio: &ScoreTrack, quality: &ScoreTrack) -> Result<FusedTrack> {
    let n = vision.len();
    if audio.len() != n || quality.len() != n {
        return Err(Error::Alignment(format!(
            "track lengths differ: vision {} ({}), audio {} ({}), quality {} ({})",
            n,
            vision.segment_id,
            audio.len(),
            audio.segment_id,
            quality.len(),
            quality.segment_id
        )));
    }
    if audio.segment_id != vision.segment_id || quality.segment_id != vision.segment_id {
        return Err(Error::Alignment(format!(
            "segment ids differ: vision {}, audio {}, quality {}",
            vision.segment_id, audio.segment_id, quality.segment_id
        )));
    }
    let scores = (0..n)
        .map(|i| quavf_fuse(vision.scores[i], audio.scores[i], quality.scores[i]))
        .collect::<Result<Vec<_>>>()?;
    Ok(FusedTrack {
        segment_id: vision.segment_id.clone(),
        scores,
        weights: quality.scores.clone(),
    })
}

/// Centered moving average; the window shrinks at the sequence ends.
pub fn moving_average(scores: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "moving-average window must be odd and >= 1, got {window}"
        )));
    }
    let half = window / 2;
    let n = scores.len();
    // offsets from the window's first value keep constant runs exact
    Ok((0..n)
        .map(|t| {
            let lo = t.saturating_sub(half);
            let hi = (t + half).min(n - 1);
            let slice = &scores[lo..=hi];
            let base = slice[0];
            base + slice.iter().map(|&x| x - base).sum::<f64>() / slice.len() as f64
        })
        .collect())
}

pub fn smooth_track(track: &ScoreTrack, window: usize) -> Result<ScoreTrack> {
    Ok(ScoreTrack {
        segment_id: track.segment_id.clone(),
        scores: moving_average(&track.scores, window)?,
    })
}

/// When the moving average is applied relative to fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionOrder {
    #[default]
    FuseThenSmooth,
    SmoothThenFuse,
}

/// Fused tracks as `segment_id,frame_index,score,quality`.
pub fn write_fused_file(path: &Path, tracks: &[FusedTrack]) -> Result<()> {
    let mut out = String::from("segment_id,frame_index,score,quality\n");
    for t in tracks {
        for (i, (s, q)) in t.scores.iter().zip(&t.weights).enumerate() {
            let _ = writeln!(out, "{},{},{},{}", t.segment_id, i, format_sig9(*s), format_sig9(*q));
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
