//! Face quality from landmark confidences: per-frame and per-window
//! scores, threshold filtering of training samples, and one-hot
//! quantization for the auxiliary quality feature.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{window_positions, Image, ScoreTrack, Segment, WINDOW_STRIDE_S};

/// Number of landmark points per face.
pub const N_LANDMARKS: usize = 68;

/// Source of per-landmark confidences for a face crop.
pub trait ConfidenceProvider: Sync {
    /// Confidences for one frame, empty when the frame has no crop.
    fn confidences(&self, segment_id: &str, frame: usize, crop: Option<&Image>) -> Result<Vec<f64>>;
}

/// Every crop gets `n_points` copies of `value`.
#[derive(Debug, Clone)]
pub struct ConstantProvider {
    pub value: f64,
    pub n_points: usize,
}

impl ConfidenceProvider for ConstantProvider {
    fn confidences(&self, _: &str, _: usize, crop: Option<&Image>) -> Result<Vec<f64>> {
        Ok(match crop {
            Some(_) => vec![self.value; self.n_points],
            None => Vec::new(),
        })
    }
}

/// `{segment_id: {frame_index: [confidence; 68]}}`, the synthetic
/// generator's ground-truth sidecar.
pub type LandmarkTable = BTreeMap<String, BTreeMap<usize, Vec<f64>>>;

#[derive(Debug, Clone, Default)]
pub struct SidecarProvider {
    table: LandmarkTable,
}

impl SidecarProvider {
    pub fn new(table: LandmarkTable) -> Self {
        Self { table }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: LandmarkTable =
            serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?;
        Ok(Self { table })
    }
}

impl ConfidenceProvider for SidecarProvider {
    fn confidences(&self, segment_id: &str, frame: usize, crop: Option<&Image>) -> Result<Vec<f64>> {
        if crop.is_none() {
            return Ok(Vec::new());
        }
        self.table
            .get(segment_id)
            .and_then(|frames| frames.get(&frame))
            .cloned()
            .ok_or_else(|| {
                Error::Validation(format!(
                    "no landmark confidences for segment {segment_id} frame {frame}"
                ))
            })
    }
}

pub fn write_landmarks(path: &Path, table: &LandmarkTable) -> Result<()> {
    let json = serde_json::to_string(table).expect("landmarks serialize");
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Mean landmark confidence; a frame without a face scores 0.
pub fn frame_quality(confidences: &[f64]) -> Result<f64> {
    if let Some(bad) = confidences.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::Validation(format!(
            "landmark confidence {bad} outside [0, 1]"
        )));
    }
    if confidences.is_empty() {
        return Ok(0.0);
    }
    Ok(confidences.iter().sum::<f64>() / confidences.len() as f64)
}

/// Mean frame quality over every entry of a sample.
pub fn sample_quality(frame_qualities: &[f64]) -> Result<f64> {
    if frame_qualities.is_empty() {
        return Err(Error::Validation("sample quality of an empty sample".into()));
    }
    if let Some(bad) = frame_qualities.iter().find(|q| !(0.0..=1.0).contains(*q)) {
        return Err(Error::Validation(format!("frame quality {bad} outside [0, 1]")));
    }
    Ok(frame_qualities.iter().sum::<f64>() / frame_qualities.len() as f64)
}

/// Keep samples whose quality is strictly above `tau`.
pub fn filter_samples<T>(samples: Vec<(T, f64)>, tau: f64) -> Result<Vec<(T, f64)>> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config(format!("filter threshold {tau} outside [0, 1]")));
    }
    Ok(samples.into_iter().filter(|(_, q)| *q > tau).collect())
}

/// Hot index of `q` among `n_bins` equal-width bins, clamping `q = 1`
/// into the last bin.
pub fn quality_bin(q: f64, n_bins: usize) -> Result<usize> {
    if n_bins < 2 {
        return Err(Error::Config(format!("n_bins must be at least 2, got {n_bins}")));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Validation(format!("quality {q} outside [0, 1]")));
    }
    Ok(((q * n_bins as f64).floor() as usize).min(n_bins - 1))
}

pub fn quantize_quality(q: f64, n_bins: usize) -> Result<Vec<f64>> {
    let hot = quality_bin(q, n_bins)?;
    let mut v = vec![0.0; n_bins];
    v[hot] = 1.0;
    Ok(v)
}

/// Per-frame and per-window face quality of one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct QualityTrack {
    pub segment_id: String,
    /// Mean landmark confidence of each frame (0 without a box).
    pub frame_quality: Vec<f64>,
    /// Sample quality of the 15-entry window centered on each frame;
    /// padded entries count as 0. Used as training-sample quality and as
    /// the fusion weight.
    pub window_quality: Vec<f64>,
}

impl QualityTrack {
    pub fn window_track(&self) -> ScoreTrack {
        ScoreTrack {
            segment_id: self.segment_id.clone(),
            scores: self.window_quality.clone(),
        }
    }

    pub fn frame_track(&self) -> ScoreTrack {
        ScoreTrack {
            segment_id: self.segment_id.clone(),
            scores: self.frame_quality.clone(),
        }
    }
}

/// Windowed sample quality for every target given per-frame qualities.
pub fn window_qualities(timestamps: &[f64], frame_quality: &[f64]) -> Result<Vec<f64>> {
    (0..timestamps.len())
        .map(|t| {
            let (idx, inside) = window_positions(timestamps, t, WINDOW_STRIDE_S);
            let entries: Vec<f64> = idx
                .iter()
                .zip(inside)
                .map(|(&i, inside)| if inside { frame_quality[i] } else { 0.0 })
                .collect();
            sample_quality(&entries)
        })
        .collect()
}

pub fn quality_track(segment: &Segment, provider: &dyn ConfidenceProvider) -> Result<QualityTrack> {
    let frame_quality = segment
        .frames
        .iter()
        .map(|f| frame_quality(&provider.confidences(&segment.id, f.index, f.crop.as_ref())?))
        .collect::<Result<Vec<_>>>()?;
    let window_quality = window_qualities(&segment.timestamps(), &frame_quality)?;
    Ok(QualityTrack {
        segment_id: segment.id.clone(),
        frame_quality,
        window_quality,
    })
}
