//! Frame-level accuracy and average precision.
//!
//! mAP here is the single-class average precision over all frames of all
//! evaluated segments pooled together. A per-segment mean is available as
//! [`per_segment_map`] for comparison.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::moving_average;
use crate::types::ScoreTrack;

/// Fraction of frames with `(score > threshold) == label`.
pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check_lengths(scores, labels)?;
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s > threshold) == (l == 1))
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Alignment(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::UndefinedMetric("no frames to evaluate".into()));
    }
    Ok(())
}

/// Mean of precision at the rank of every positive, ranking by descending
/// score with ties broken by ascending input index.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs at least one positive".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable sort keeps index order among equal scores
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentLabels {
    pub id: String,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub n_frames: usize,
    pub threshold: f64,
    pub window: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        format!(
            "{:<10} {:>10}\n{:<10} {:>10.4}\n{:<10} {:>10.4}\n{:<10} {:>10}\n{:<10} {:>10}\n{:<10} {:>10}\n",
            "metric", "value",
            "accuracy", self.accuracy,
            "mAP", self.map,
            "frames", self.n_frames,
            "threshold", self.threshold,
            "window", self.window,
        )
    }
}

fn smoothed_pool(
    tracks: &[ScoreTrack],
    segments: &[SegmentLabels],
    window: usize,
) -> Result<Vec<(Vec<f64>, Vec<u8>)>> {
    let by_id: BTreeMap<&str, &ScoreTrack> =
        tracks.iter().map(|t| (t.segment_id.as_str(), t)).collect();
    segments
        .iter()
        .map(|seg| {
            let track = by_id.get(seg.id.as_str()).ok_or_else(|| {
                Error::Alignment(format!("no score track for segment {}", seg.id))
            })?;
            if track.len() != seg.labels.len() {
                return Err(Error::Alignment(format!(
                    "segment {}: {} scores for {} frames",
                    seg.id,
                    track.len(),
                    seg.labels.len()
                )));
            }
            Ok((moving_average(&track.scores, window)?, seg.labels.clone()))
        })
        .collect()
}

/// Smooth every segment's track, pool all frames, and score them.
pub fn evaluate(
    tracks: &[ScoreTrack],
    segments: &[SegmentLabels],
    threshold: f64,
    window: usize,
) -> Result<EvalReport> {
    let pooled = smoothed_pool(tracks, segments, window)?;
    let scores: Vec<f64> = pooled.iter().flat_map(|(s, _)| s.iter().copied()).collect();
    let labels: Vec<u8> = pooled.iter().flat_map(|(_, l)| l.iter().copied()).collect();
    Ok(EvalReport {
        accuracy: accuracy(&scores, &labels, threshold)?,
        map: average_precision(&scores, &labels)?,
        n_frames: scores.len(),
        threshold,
        window,
    })
}

/// Mean of per-segment AP over segments that contain a positive frame.
pub fn per_segment_map(
    tracks: &[ScoreTrack],
    segments: &[SegmentLabels],
    window: usize,
) -> Result<f64> {
    let pooled = smoothed_pool(tracks, segments, window)?;
    let aps = pooled
        .iter()
        .filter(|(_, l)| l.contains(&1))
        .map(|(s, l)| average_precision(s, l))
        .collect::<Result<Vec<_>>>()?;
    if aps.is_empty() {
        return Err(Error::UndefinedMetric("no segment has a positive frame".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}
