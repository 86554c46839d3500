//! Segment, frame and score data model, the dataset manifest, and the
//! 15-frame window extraction shared by the vision and AV-joint models.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sample rate every clip must already have.
pub const SAMPLE_RATE: u32 = 16_000;
/// Frames per window (7 before the target, the target, 7 after).
pub const WINDOW_LEN: usize = 15;
/// Index of the target frame inside a window.
pub const WINDOW_CENTER: usize = 7;
/// Spacing of window positions in seconds (2 fps).
pub const WINDOW_STRIDE_S: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::Validation(format!("invalid bounding box {self:?}")));
        }
        Ok(())
    }
}

/// 8-bit image, row-major `height x width x channels`. Pixel intensities
/// are exposed as `f64` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0; height * width * channels],
        }
    }

    /// Build from a function returning intensities in `[0, 1]` (clamped).
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(quantize_u8(f(y, x, c)));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        f64::from(self.data[(y * self.width + x) * self.channels + c]) / 255.0
    }

    pub fn is_blank(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
            .into_rgb8();
        Ok(Self {
            height: img.height() as usize,
            width: img.width() as usize,
            channels: 3,
            data: img.into_raw(),
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            c => return Err(Error::Image(format!("cannot save {c}-channel image"))),
        };
        image::save_buffer(
            path,
            &self.data,
            self.width as u32,
            self.height as u32,
            color,
        )
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }
}

fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub timestamp: f64,
    pub bbox: Option<BoundingBox>,
    pub crop: Option<Image>,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Validation("audio clip is empty".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Validation("sample rate must be positive".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    pub fn read_wav(path: &Path) -> Result<Self> {
        let mut reader = hound::WavReader::open(path)
            .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
        let spec = reader.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 {
            return Err(Error::Audio(format!(
                "{}: expected mono 16-bit PCM, got {} channels at {} bits",
                path.display(),
                spec.channels,
                spec.bits_per_sample
            )));
        }
        let samples = reader
            .samples::<i16>()
            .map(|s| s.map(|v| f32::from(v) / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
        Self::new(samples, spec.sample_rate)
    }

    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let audio_err = |e: hound::Error| Error::Audio(format!("{}: {e}", path.display()));
        let mut writer = hound::WavWriter::create(path, spec).map_err(audio_err)?;
        for &s in &self.samples {
            let v = (f64::from(s) * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            writer.write_sample(v).map_err(audio_err)?;
        }
        writer.finalize().map_err(audio_err)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub id: String,
    pub frames: Vec<Frame>,
    pub audio: AudioClip,
    pub frame_rate: f64,
}

impl Segment {
    pub fn labels(&self) -> Vec<u8> {
        self.frames.iter().map(|f| f.label).collect()
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.timestamp).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |frame: Option<usize>, msg: String| {
            Err(Error::Validation(match frame {
                Some(i) => format!("segment {} frame {i}: {msg}", self.id),
                None => format!("segment {}: {msg}", self.id),
            }))
        };
        if self.frames.is_empty() {
            return fail(None, "has no frames".into());
        }
        if !(self.frame_rate.is_finite() && self.frame_rate > 0.0) {
            return fail(None, format!("invalid frame rate {}", self.frame_rate));
        }
        if self.audio.sample_rate != SAMPLE_RATE {
            return fail(
                None,
                format!(
                    "audio must be {SAMPLE_RATE} Hz, got {}",
                    self.audio.sample_rate
                ),
            );
        }
        for (ord, f) in self.frames.iter().enumerate() {
            if f.index != ord {
                return fail(Some(f.index), format!("out of order (position {ord})"));
            }
            if !f.timestamp.is_finite() {
                return fail(Some(ord), "non-finite timestamp".into());
            }
            if ord > 0 && f.timestamp <= self.frames[ord - 1].timestamp {
                return fail(Some(ord), "timestamps must strictly increase".into());
            }
            if f.label > 1 {
                return fail(Some(ord), format!("label {} is not 0/1", f.label));
            }
            if f.bbox.is_some() != f.crop.is_some() {
                return fail(Some(ord), "crop must be present exactly when the box is".into());
            }
            if let Some(b) = &f.bbox {
                if let Err(e) = b.validate() {
                    return fail(Some(ord), e.to_string());
                }
            }
        }
        let last = self.frames.last().expect("non-empty").timestamp;
        if self.audio.duration() < last {
            return fail(
                None,
                format!(
                    "audio lasts {:.3} s but last frame is at {last:.3} s",
                    self.audio.duration()
                ),
            );
        }
        Ok(())
    }
}

/// Per-frame scores in `[0, 1]` for one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTrack {
    pub segment_id: String,
    pub scores: Vec<f64>,
}

impl ScoreTrack {
    pub fn new(segment_id: impl Into<String>, scores: Vec<f64>) -> Result<Self> {
        let segment_id = segment_id.into();
        for (i, s) in scores.iter().enumerate() {
            check_unit(*s, &segment_id, i)?;
        }
        Ok(Self { segment_id, scores })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

fn check_unit(v: f64, id: &str, frame: usize) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Validation(format!(
            "segment {id} frame {frame}: value {v} outside [0, 1]"
        )));
    }
    Ok(())
}

/// The 15 entries around a target frame sampled at 2 fps.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameWindow {
    pub target_index: usize,
    /// Source frame of every position (boundary frame for padded positions).
    pub frame_indices: [usize; WINDOW_LEN],
    pub crops: Vec<Image>,
    /// `true` for a real frame with a face box, `false` for padding.
    pub mask: [bool; WINDOW_LEN],
}

/// Frame lookup behind [`extract_window`]: the source frame of each of the
/// 15 positions and whether that position fell inside the segment.
pub fn window_positions(
    timestamps: &[f64],
    target: usize,
    stride_s: f64,
) -> ([usize; WINDOW_LEN], [bool; WINDOW_LEN]) {
    let first = timestamps[0];
    let last = *timestamps.last().expect("non-empty timeline");
    let center = timestamps[target];
    let mut idx = [0usize; WINDOW_LEN];
    let mut inside = [false; WINDOW_LEN];
    for (pos, k) in (-(WINDOW_CENTER as i64)..=WINDOW_CENTER as i64).enumerate() {
        let t = center + k as f64 * stride_s;
        if k == 0 {
            idx[pos] = target;
            inside[pos] = true;
        } else if t < first {
            idx[pos] = 0;
        } else if t > last {
            idx[pos] = timestamps.len() - 1;
        } else {
            idx[pos] = nearest_frame(timestamps, t);
            inside[pos] = true;
        }
    }
    (idx, inside)
}

/// Nearest timestamp to `t`; ties go to the earlier frame.
fn nearest_frame(timestamps: &[f64], t: f64) -> usize {
    let after = timestamps.partition_point(|&x| x < t);
    if after == 0 {
        return 0;
    }
    if after == timestamps.len() {
        return timestamps.len() - 1;
    }
    let before = after - 1;
    if t - timestamps[before] <= timestamps[after] - t {
        before
    } else {
        after
    }
}

/// Window of 15 crops centered on `target`. Positions outside the segment
/// repeat the boundary frame; they and box-less frames (all-zero crops)
/// are marked `false` in the mask.
pub fn extract_window(segment: &Segment, target: usize, stride_s: f64) -> Result<FrameWindow> {
    if target >= segment.frames.len() {
        return Err(Error::Validation(format!(
            "segment {}: target {target} out of range (0..{})",
            segment.id,
            segment.frames.len()
        )));
    }
    let (frame_indices, inside) = window_positions(&segment.timestamps(), target, stride_s);
    let template = segment
        .frames
        .iter()
        .find_map(|f| f.crop.as_ref())
        .map(|c| (c.height, c.width, c.channels))
        .unwrap_or((32, 32, 3));
    let mut mask = [false; WINDOW_LEN];
    let crops = frame_indices
        .iter()
        .zip(inside)
        .enumerate()
        .map(|(pos, (&fi, inside))| match &segment.frames[fi].crop {
            Some(c) => {
                mask[pos] = inside;
                c.clone()
            }
            None => Image::zeros(template.0, template.1, template.2),
        })
        .collect();
    Ok(FrameWindow {
        target_index: target,
        frame_indices,
        crops,
        mask,
    })
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub index: usize,
    pub timestamp: f64,
    /// Required; optional here only so a missing label is reported as a
    /// validation error instead of a parse error.
    #[serde(default)]
    pub label: Option<u8>,
    #[serde(default, rename = "box", skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoundingBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSegment {
    pub id: String,
    pub frame_rate: f64,
    pub audio_path: String,
    pub frames: Vec<ManifestFrame>,
}

pub fn write_manifest(path: &Path, records: &[ManifestSegment]) -> Result<()> {
    let json = serde_json::to_string_pretty(records).expect("manifest serializes");
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Parse manifest records without touching media files.
pub fn read_manifest_records(path: &Path) -> Result<Vec<ManifestSegment>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let ctx = path.display().to_string();
    let raw: Vec<serde_json::Value> =
        serde_json::from_str(&text).map_err(|e| Error::parse(&ctx, e))?;
    raw.into_iter()
        .enumerate()
        .map(|(i, v)| {
            let id = v
                .get("id")
                .and_then(|x| x.as_str())
                .unwrap_or("<no id>")
                .to_string();
            serde_json::from_value(v)
                .map_err(|e| Error::parse(format!("{ctx} record {i} (id {id})"), e))
        })
        .collect()
}

/// Load and validate every segment, media included, sorted by id.
pub fn load_manifest(path: &Path) -> Result<Vec<Segment>> {
    let records = read_manifest_records(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut segments = records
        .iter()
        .map(|r| segment_from_record(r, &base))
        .collect::<Result<Vec<_>>>()?;
    segments.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(segments)
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn segment_from_record(r: &ManifestSegment, base: &Path) -> Result<Segment> {
    let audio = AudioClip::read_wav(&resolve(base, &r.audio_path))?;
    let frames = r
        .frames
        .iter()
        .map(|f| {
            let label = f.label.ok_or_else(|| {
                Error::Validation(format!("segment {} frame {}: missing label", r.id, f.index))
            })?;
            let crop = f
                .crop_path
                .as_deref()
                .map(|p| Image::load_png(&resolve(base, p)))
                .transpose()?;
            Ok(Frame {
                index: f.index,
                timestamp: f.timestamp,
                bbox: f.bbox,
                crop,
                label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let seg = Segment {
        id: r.id.clone(),
        frames,
        audio,
        frame_rate: r.frame_rate,
    };
    seg.validate()?;
    Ok(seg)
}

// ---------------------------------------------------------------------------
// Score files

/// Decimal rendering with 9 significant digits.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0.00000000".to_string();
    }
    // exponent after rounding to 9 digits, so 0.99999999996 becomes 1.00000000
    let sci = format!("{v:.8e}");
    let exp: i32 = sci[sci.find('e').expect("exponent") + 1..]
        .parse()
        .expect("integer exponent");
    let decimals = (8 - exp).max(0) as usize;
    format!("{v:.decimals$}")
}

/// Round to what the score file stores.
pub fn round_sig9(v: f64) -> f64 {
    format_sig9(v).parse().expect("formatted float parses")
}

/// Write tracks in order, one row per frame, under the header
/// `segment_id,frame_index,<column>`.
pub fn write_track_file(path: &Path, tracks: &[ScoreTrack], column: &str) -> Result<()> {
    let mut out = format!("segment_id,frame_index,{column}\n");
    for t in tracks {
        for (i, s) in t.scores.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", t.segment_id, i, format_sig9(*s));
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read a file written by [`write_track_file`]; tracks come back in file
/// order. Rows of a segment must be contiguous with frame indices 0, 1, ...
/// Sidecar columns after `<column>` are allowed and ignored.
pub fn read_track_file(path: &Path, column: &str) -> Result<Vec<ScoreTrack>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_track_text(&text, column, &path.display().to_string())
}

fn parse_track_text(text: &str, column: &str, ctx: &str) -> Result<Vec<ScoreTrack>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let expected = format!("segment_id,frame_index,{column}");
    let header_fields: Vec<&str> = header.trim().split(',').collect();
    if header_fields.len() < 3 || header_fields[..3].join(",") != expected {
        return Err(Error::parse(
            ctx,
            format!("expected header `{expected}`, found `{header}`"),
        ));
    }
    let mut tracks: Vec<ScoreTrack> = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = n + 2;
        let bad = |m: &str| Error::parse(format!("{ctx} line {row}"), m);
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header_fields.len() {
            return Err(bad(&format!("expected {} fields", header_fields.len())));
        }
        let (id, idx, val) = (fields[0], fields[1], fields[2]);
        let idx: usize = idx.trim().parse().map_err(|_| bad("bad frame index"))?;
        let val: f64 = val.trim().parse().map_err(|_| bad("bad value"))?;
        check_unit(val, id, idx)?;
        match tracks.last_mut() {
            Some(t) if t.segment_id == id => {
                if idx != t.scores.len() {
                    return Err(bad("frame indices must be consecutive from 0"));
                }
                t.scores.push(val);
            }
            _ => {
                if idx != 0 {
                    return Err(bad("frame indices must start at 0"));
                }
                if tracks.iter().any(|t| t.segment_id == id) {
                    return Err(bad("segment rows are not contiguous"));
                }
                tracks.push(ScoreTrack {
                    segment_id: id.to_string(),
                    scores: vec![val],
                });
            }
        }
    }
    Ok(tracks)
}

pub fn write_scores(track: &ScoreTrack, path: &Path) -> Result<()> {
    write_track_file(path, std::slice::from_ref(track), "score")
}

/// Read a single-segment score file. A header-only file yields an empty
/// track with an empty id, which later fails alignment checks.
pub fn read_scores(path: &Path) -> Result<ScoreTrack> {
    let mut tracks = read_track_file(path, "score")?;
    match tracks.len() {
        0 => Ok(ScoreTrack {
            segment_id: String::new(),
            scores: Vec::new(),
        }),
        1 => Ok(tracks.remove(0)),
        n => Err(Error::parse(
            path.display().to_string(),
            format!("expected one segment, found {n}"),
        )),
    }
}
