//! Deterministic synthetic talking-to-me segments.
//!
//! Each segment alternates talking / not-talking runs. Audio carries a
//! harmonic voice during positive frames; negative frames hold either
//! background noise alone or a detuned voice, so audio is informative but
//! not perfect. Crops show a drawn face whose mouth opens and closes while
//! talking and stays closed otherwise. Whole segments can be visually
//! corrupted, in which case every crop is pure noise. Individual frames can
//! lose their face box.
//! A landmark-confidence sidecar stands in for a landmark detector: high
//! confidences on intact faces, low on corrupted ones.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quality::{write_landmarks, LandmarkTable, N_LANDMARKS};
use crate::types::{
    write_manifest, AudioClip, BoundingBox, Frame, Image, ManifestFrame, ManifestSegment,
    Segment, SAMPLE_RATE,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LANDMARKS_FILE: &str = "landmarks.json";
pub const META_FILE: &str = "segments_meta.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_segments: usize,
    pub frames_per_segment: usize,
    pub frame_rate: f64,
    pub crop_size: usize,
    pub p_box_dropout: f64,
    pub p_visual_corrupt: f64,
    pub snr_clean_db: f64,
    pub seed: u64,
    /// Shortest talking / not-talking run, in frames.
    pub run_min_frames: usize,
    /// Mean run length in frames (minimum plus a geometric excess).
    pub run_mean_frames: f64,
    /// Probability that a not-talking run carries a detuned voice instead
    /// of background noise only.
    pub p_negative_voice: f64,
    /// Range of the relative pitch offset of the detuned voice.
    pub detune: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_segments: 200,
            frames_per_segment: 300,
            frame_rate: 30.0,
            crop_size: 32,
            p_box_dropout: 0.3,
            p_visual_corrupt: 0.5,
            snr_clean_db: 15.0,
            seed: 7,
            run_min_frames: 120,
            run_mean_frames: 240.0,
            p_negative_voice: 0.5,
            detune: (0.06, 0.15),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {p} is not a probability")))
            }
        };
        prob("p_box_dropout", self.p_box_dropout)?;
        prob("p_visual_corrupt", self.p_visual_corrupt)?;
        prob("p_negative_voice", self.p_negative_voice)?;
        if self.n_segments == 0 || self.frames_per_segment == 0 || self.run_min_frames == 0 {
            return Err(Error::Config("segment, frame and run counts must be at least 1".into()));
        }
        if !self.frame_rate.is_finite() || self.frame_rate <= 0.0 || self.crop_size < 8 {
            return Err(Error::Config("frame_rate must be positive and crop_size >= 8".into()));
        }
        if self.run_mean_frames.is_nan() || self.run_mean_frames < self.run_min_frames as f64 {
            return Err(Error::Config("run_mean_frames must be >= run_min_frames".into()));
        }
        if !(self.detune.0 > 0.0 && self.detune.0 <= self.detune.1) {
            return Err(Error::Config("detune range must be positive and ordered".into()));
        }
        Ok(())
    }
}

/// Ground truth about a generated segment that the manifest does not carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentMeta {
    pub corrupt: bool,
    pub f0_hz: f64,
}

pub struct GeneratedSegment {
    pub segment: Segment,
    pub landmarks: BTreeMap<usize, Vec<f64>>,
    pub meta: SegmentMeta,
}

pub fn segment_id(index: usize) -> String {
    format!("seg{index:04}")
}

fn segment_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Alternating run labels: minimum length plus geometric excess.
fn run_labels(cfg: &SynthConfig, rng: &mut impl Rng) -> Vec<u8> {
    let excess_mean = cfg.run_mean_frames - cfg.run_min_frames as f64;
    let geo = Geometric::new(1.0 / (1.0 + excess_mean)).expect("valid geometric");
    let mut labels = Vec::with_capacity(cfg.frames_per_segment);
    let mut state = u8::from(rng.random_bool(0.5));
    while labels.len() < cfg.frames_per_segment {
        let len = cfg.run_min_frames + geo.sample(rng) as usize;
        labels.extend(std::iter::repeat_n(state, len));
        state = 1 - state;
    }
    labels.truncate(cfg.frames_per_segment);
    labels
}

/// Per-run negative style: `Some(detune)` for a detuned voice.
fn run_styles(labels: &[u8], cfg: &SynthConfig, rng: &mut impl Rng) -> Vec<Option<f64>> {
    let mut out = Vec::with_capacity(labels.len());
    let mut current = None;
    for (i, &l) in labels.iter().enumerate() {
        if i == 0 || l != labels[i - 1] {
            current = if l == 0 && rng.random_bool(cfg.p_negative_voice) {
                Some(rng.random_range(cfg.detune.0..=cfg.detune.1))
            } else {
                None
            };
        }
        out.push(current);
    }
    out
}

const HARMONICS: [f64; 3] = [1.0, 0.6, 0.35];
const VOICE_AMP: f64 = 0.25;

fn synth_audio(
    cfg: &SynthConfig,
    labels: &[u8],
    styles: &[Option<f64>],
    f0: f64,
    rng: &mut impl Rng,
) -> Vec<f32> {
    let sr = f64::from(SAMPLE_RATE);
    let n = (labels.len() as f64 / cfg.frame_rate * sr).round() as usize;
    // mean power of the enveloped harmonic stack
    let env_ms = 0.7f64.powi(2) + 0.3f64.powi(2) / 2.0;
    let voice_power = VOICE_AMP.powi(2) * HARMONICS.iter().map(|a| a * a / 2.0).sum::<f64>() * env_ms;
    let noise_std = (voice_power / 10f64.powf(cfg.snr_clean_db / 10.0)).sqrt();
    let phases: Vec<f64> = HARMONICS.iter().map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let syllable = rng.random_range(3.0..5.0);
    (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let frame = ((t * cfg.frame_rate) as usize).min(labels.len() - 1);
            let pitch = match (labels[frame], styles[frame]) {
                (1, _) => Some(f0),
                (_, Some(d)) => Some(f0 * (1.0 + d)),
                _ => None,
            };
            let voice = pitch.map_or(0.0, |p| {
                let env = 0.7 + 0.3 * (2.0 * PI * syllable * t).sin();
                VOICE_AMP
                    * env
                    * HARMONICS
                        .iter()
                        .zip(&phases)
                        .enumerate()
                        .map(|(h, (a, ph))| a * (2.0 * PI * (h + 1) as f64 * p * t + ph).sin())
                        .sum::<f64>()
            });
            let noise: f64 = StandardNormal.sample(rng);
            (voice + noise_std * noise).clamp(-1.0, 1.0) as f32
        })
        .collect()
}

const PIXEL_NOISE: f64 = 0.03;

struct FaceStyle {
    skin: [f64; 3],
    mouth_hz: f64,
    mouth_phase: f64,
}

fn draw_face(size: usize, style: &FaceStyle, openness: f64, rng: &mut impl Rng) -> Image {
    let s = size as f64;
    let cx = s / 2.0 + rng.random_range(-1.5..1.5);
    let cy = s / 2.0 + rng.random_range(-1.5..1.5);
    let brightness = rng.random_range(0.85..1.15);
    let pixel_noise = Normal::new(0.0, PIXEL_NOISE).expect("finite std");
    let mouth_h = (0.04 + 0.18 * openness) * s;
    let mouth_cy = cy + 0.22 * s;
    Image::from_fn(size, size, 3, |y, x, c| {
        let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
        let face = ((fx - cx) / (0.34 * s)).powi(2) + ((fy - cy) / (0.44 * s)).powi(2) <= 1.0;
        let eye = [-1.0, 1.0].iter().any(|side| {
            (fx - (cx + side * 0.16 * s)).powi(2) + (fy - (cy - 0.12 * s)).powi(2)
                <= (0.06 * s).powi(2)
        });
        let mouth = (fx - cx).abs() <= 0.16 * s && (fy - mouth_cy).abs() <= mouth_h / 2.0;
        let base = if mouth {
            [0.3, 0.05, 0.08][c]
        } else if eye {
            0.1
        } else if face {
            style.skin[c] * brightness
        } else {
            [0.35, 0.4, 0.45][c]
        };
        base + pixel_noise.sample(rng)
    })
}

fn noise_crop(size: usize, rng: &mut impl Rng) -> Image {
    Image::from_fn(size, size, 3, |_, _, _| rng.random_range(0.0..1.0))
}

fn confidences(level: f64, spread: f64, rng: &mut impl Rng) -> Vec<f64> {
    let normal = Normal::new(level, spread).expect("finite std");
    (0..N_LANDMARKS)
        .map(|_| (normal.sample(rng).clamp(0.0, 1.0) * 1e4).round() / 1e4)
        .collect()
}

/// Generate segment `index` in memory. Output depends only on
/// `(cfg, index)`.
pub fn generate_segment(cfg: &SynthConfig, index: usize) -> Result<GeneratedSegment> {
    cfg.validate()?;
    let mut rng = segment_rng(cfg.seed, index);
    let labels = run_labels(cfg, &mut rng);
    let styles = run_styles(&labels, cfg, &mut rng);
    let corrupt = rng.random_bool(cfg.p_visual_corrupt);
    let f0 = rng.random_range(180.0..260.0);
    let face = FaceStyle {
        skin: [
            rng.random_range(0.7..0.95),
            rng.random_range(0.55..0.75),
            rng.random_range(0.45..0.65),
        ],
        mouth_hz: rng.random_range(1.1..2.3),
        mouth_phase: rng.random_range(0.0..2.0 * PI),
    };
    let box_origin = (rng.random_range(200.0..1500.0), rng.random_range(100.0..700.0));

    let samples = synth_audio(cfg, &labels, &styles, f0, &mut rng);
    let audio = AudioClip::new(samples, SAMPLE_RATE)?;

    let mut landmarks = BTreeMap::new();
    let mut frames = Vec::with_capacity(labels.len());
    for (i, &label) in labels.iter().enumerate() {
        let t = i as f64 / cfg.frame_rate;
        let has_box = !rng.random_bool(cfg.p_box_dropout);
        let (bbox, crop) = if has_box {
            let crop = if corrupt {
                noise_crop(cfg.crop_size, &mut rng)
            } else {
                let openness = if label == 1 {
                    0.5 + 0.5 * (2.0 * PI * face.mouth_hz * t + face.mouth_phase).sin()
                } else {
                    rng.random_range(0.0..0.08)
                };
                draw_face(cfg.crop_size, &face, openness, &mut rng)
            };
            let conf = if corrupt {
                confidences(0.05, 0.03, &mut rng)
            } else {
                confidences(0.9, 0.04, &mut rng)
            };
            landmarks.insert(i, conf);
            let side = 4.0 * cfg.crop_size as f64;
            let bbox = BoundingBox {
                x: box_origin.0 + rng.random_range(-8.0..8.0),
                y: box_origin.1 + rng.random_range(-8.0..8.0),
                w: side,
                h: side,
            };
            (Some(bbox), Some(crop))
        } else {
            (None, None)
        };
        frames.push(Frame {
            index: i,
            timestamp: t,
            bbox,
            crop,
            label,
        });
    }
    let segment = Segment {
        id: segment_id(index),
        frames,
        audio,
        frame_rate: cfg.frame_rate,
    };
    segment.validate()?;
    Ok(GeneratedSegment {
        segment,
        landmarks,
        meta: SegmentMeta { corrupt, f0_hz: f0 },
    })
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Write the dataset under `out_dir` and return the manifest path.
///
/// Layout: `manifest.json`, `landmarks.json`, `segments_meta.json`,
/// `audio/<id>.wav`, `crops/<id>/<frame>.png`.
pub fn generate(cfg: &SynthConfig, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    create_dir(&out_dir.join("audio"))?;
    let mut records = Vec::with_capacity(cfg.n_segments);
    let mut landmarks: LandmarkTable = BTreeMap::new();
    let mut meta = BTreeMap::new();
    for index in 0..cfg.n_segments {
        let generated = generate_segment(cfg, index)?;
        let seg = &generated.segment;
        let audio_rel = format!("audio/{}.wav", seg.id);
        seg.audio.write_wav(&out_dir.join(&audio_rel))?;
        let crop_dir = out_dir.join("crops").join(&seg.id);
        create_dir(&crop_dir)?;
        let frames = seg
            .frames
            .iter()
            .map(|f| {
                let crop_path = match &f.crop {
                    Some(c) => {
                        let rel = format!("crops/{}/{:05}.png", seg.id, f.index);
                        c.save_png(&out_dir.join(&rel))?;
                        Some(rel)
                    }
                    None => None,
                };
                Ok(ManifestFrame {
                    index: f.index,
                    timestamp: f.timestamp,
                    label: Some(f.label),
                    bbox: f.bbox,
                    crop_path,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        records.push(ManifestSegment {
            id: seg.id.clone(),
            frame_rate: seg.frame_rate,
            audio_path: audio_rel,
            frames,
        });
        landmarks.insert(seg.id.clone(), generated.landmarks);
        meta.insert(seg.id.clone(), generated.meta);
    }
    let manifest = out_dir.join(MANIFEST_FILE);
    write_manifest(&manifest, &records)?;
    write_landmarks(&out_dir.join(LANDMARKS_FILE), &landmarks)?;
    let meta_path = out_dir.join(META_FILE);
    let json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;
    Ok(manifest)
}

pub fn read_meta(path: &Path) -> Result<BTreeMap<String, SegmentMeta>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_segments: 3,
            frames_per_segment: 40,
            run_min_frames: 5,
            run_mean_frames: 10.0,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn segment_generation_is_deterministic() {
        let a = generate_segment(&small(), 1).unwrap();
        let b = generate_segment(&small(), 1).unwrap();
        assert_eq!(a.segment, b.segment);
        assert_eq!(a.landmarks, b.landmarks);
        assert_ne!(a.segment, generate_segment(&small(), 2).unwrap().segment);
    }

    #[test]
    fn full_dropout_removes_every_box() {
        let cfg = SynthConfig {
            p_box_dropout: 1.0,
            ..small()
        };
        let g = generate_segment(&cfg, 0).unwrap();
        assert!(g.segment.frames.iter().all(|f| f.bbox.is_none() && f.crop.is_none()));
        assert!(g.landmarks.is_empty());
        assert_eq!(g.segment.labels().len(), 40);
    }

    #[test]
    fn clean_config_keeps_every_face() {
        let cfg = SynthConfig {
            p_box_dropout: 0.0,
            p_visual_corrupt: 0.0,
            ..small()
        };
        for i in 0..3 {
            let g = generate_segment(&cfg, i).unwrap();
            assert!(!g.meta.corrupt);
            assert!(g.segment.frames.iter().all(|f| f.crop.is_some()));
        }
    }

    #[test]
    fn runs_respect_minimum_length() {
        let cfg = small();
        let mut rng = segment_rng(1, 0);
        let labels = run_labels(&cfg, &mut rng);
        let mut run = 1;
        for w in labels.windows(2) {
            if w[0] == w[1] {
                run += 1;
            } else {
                assert!(run >= cfg.run_min_frames);
                run = 1;
            }
        }
    }

    #[test]
    fn invalid_probability_rejected() {
        let cfg = SynthConfig {
            p_box_dropout: 1.5,
            ..small()
        };
        assert!(cfg.validate().is_err());
    }
}
