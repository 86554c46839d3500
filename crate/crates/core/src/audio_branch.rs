//! Audio-only model: frozen spectrogram encoder, one trainable
//! self-attention layer over the encoder's 50 Hz feature sequence,
//! adaptive average pooling to the frame count, and a per-frame head.

use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audiofeat::{add_noise, crop_span, log_mel, AugmentConfig, MelSpectrogram, HOP, N_MELS};
use crate::error::{Error, Result};
use crate::nn::{
    fit, read_checkpoint, save_checkpoint, sigmoid, sinusoidal_positions, Grads, Linear, Mat,
    ParamId, ParamStore, SelfAttentionLayer, Tape, TrainConfig, Var,
};
use crate::types::{AudioClip, ScoreTrack, Segment};

/// Spectrogram columns folded into one encoder feature (2 x 10 ms).
pub const COLUMNS_PER_FEATURE: usize = 2;
/// Encoder output rate.
pub const FEATURES_PER_SECOND: usize = 50;
/// Encoder outputs for a padded 30 s input.
pub const MAX_FEATURES: usize = 1500;
const SAMPLES_PER_FEATURE: usize = HOP * COLUMNS_PER_FEATURE;

/// Maps a log-mel spectrogram to a feature sequence.
pub trait AudioEncoder {
    fn dim(&self) -> usize;
    /// First `n` output features (`n <= MAX_FEATURES`), `n x dim`.
    fn encode(&self, store: &ParamStore, mel: &MelSpectrogram, n: usize) -> Mat;
}

/// Seed-pinned random projection of non-overlapping column pairs followed
/// by `tanh`. Its parameters are always frozen.
#[derive(Debug, Clone)]
pub struct ToyAudioEncoder {
    proj: Linear,
    dim: usize,
}

impl ToyAudioEncoder {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        let proj = Linear::new(store, name, N_MELS * COLUMNS_PER_FEATURE, dim, false, rng);
        Self { proj, dim }
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.proj.w, self.proj.b]
    }
}

impl AudioEncoder for ToyAudioEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, store: &ParamStore, mel: &MelSpectrogram, n: usize) -> Mat {
        assert!(n <= mel.values.ncols() / COLUMNS_PER_FEATURE, "too many features requested");
        let width = N_MELS * COLUMNS_PER_FEATURE;
        // fixed rescaling of log10 power into roughly [-1.5, 1.5]
        let input = Mat::from_shape_fn((n, width), |(j, k)| {
            let col = j * COLUMNS_PER_FEATURE + k / N_MELS;
            (mel.values[[k % N_MELS, col]] + 4.0) / 4.0
        });
        let w = &store.get(self.proj.w).value;
        let b = &store.get(self.proj.b).value;
        (input.dot(w) + b).mapv(f64::tanh)
    }
}

/// Encoder features covering the real (unpadded) part of `clip`.
pub fn real_feature_count(n_samples: usize) -> usize {
    n_samples.div_ceil(SAMPLES_PER_FEATURE).clamp(1, MAX_FEATURES)
}

/// Averaging windows `[floor(i*T/n), ceil((i+1)*T/n))` for every output row.
pub fn adaptive_windows(len: usize, n_out: usize) -> Result<Vec<Range<usize>>> {
    if n_out == 0 || n_out > len {
        return Err(Error::Validation(format!(
            "adaptive pooling of {len} rows into {n_out} bins"
        )));
    }
    Ok((0..n_out)
        .map(|i| (i * len / n_out)..((i + 1) * len).div_ceil(n_out))
        .collect())
}

/// Adaptive average pooling of a `T x D` sequence to `n_out x D`.
pub fn adaptive_pool(features: &Mat, n_out: usize) -> Result<Mat> {
    let windows = adaptive_windows(features.nrows(), n_out)?;
    let mut out = Mat::zeros((n_out, features.ncols()));
    for (i, w) in windows.into_iter().enumerate() {
        let mean = features
            .slice(ndarray::s![w, ..])
            .mean_axis(ndarray::Axis(0))
            .expect("non-empty window");
        out.row_mut(i).assign(&mean);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AudioBranchConfig {
    pub d_model: usize,
    pub heads: usize,
    pub seed: u64,
}

impl Default for AudioBranchConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct AudioTrainConfig {
    pub optim: TrainConfig,
    pub augment: AugmentConfig,
}

/// Layer layout of the audio model; parameter values live in a store.
#[derive(Debug, Clone)]
struct AudioNet {
    d_model: usize,
    encoder: ToyAudioEncoder,
    refine: SelfAttentionLayer,
    head: Linear,
}

impl AudioNet {
    fn logits(&self, store: &ParamStore, tape: &mut Tape, features: &Mat, n_frames: usize) -> Result<Var> {
        let windows = adaptive_windows(features.nrows(), n_frames)?;
        let pe = sinusoidal_positions(features.nrows(), self.d_model);
        let x = tape.constant(features + &pe);
        let x = self.refine.forward(tape, store, x, None);
        let pooled = tape.pool_rows(x, windows);
        Ok(self.head.forward(tape, store, pooled))
    }

    fn loss_and_grads(&self, store: &ParamStore, features: &Mat, labels: &[u8]) -> Result<(f64, Grads)> {
        let mut tape = Tape::new();
        let z = self.logits(store, &mut tape, features, labels.len())?;
        let targets: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
        let loss = tape.bce_with_logits(z, &targets, &vec![1.0; labels.len()]);
        Ok((tape.scalar(loss), tape.backward(loss, store.len())))
    }

    fn loss(&self, store: &ParamStore, features: &Mat, labels: &[u8]) -> Result<f64> {
        let mut tape = Tape::new();
        let z = self.logits(store, &mut tape, features, labels.len())?;
        let targets: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
        let loss = tape.bce_with_logits(z, &targets, &vec![1.0; labels.len()]);
        Ok(tape.scalar(loss))
    }

    fn encode_clip(&self, store: &ParamStore, clip: &AudioClip) -> Result<Mat> {
        let mel = log_mel(clip)?;
        let n = real_feature_count(clip.samples.len());
        Ok(self.encoder.encode(store, &mel, n))
    }

    /// Crop (snapped to whole frames) and noise draws for one training pass.
    fn augmented_features(
        &self,
        store: &ParamStore,
        seg: &Segment,
        aug: &AugmentConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Mat, Vec<u8>)> {
        let span = frame_span(seg);
        let sr = f64::from(seg.audio.sample_rate);
        let local = crop_span(
            span.len(),
            seg.audio.sample_rate,
            aug.crop_p,
            aug.crop_min_s.min(span.len() as f64 / sr),
            rng,
        )?;
        let kept = frames_inside(seg, span.start + local.start, span.start + local.end)
            .unwrap_or(0..seg.frames.len());
        let mut clip = slice_clip(&seg.audio, frame_samples(seg, kept.clone()));
        if aug.noise_p > 0.0 && rng.random_bool(aug.noise_p) {
            clip = add_noise(&clip, (aug.snr_min_db, aug.snr_max_db), rng)?;
        }
        let labels = seg.labels()[kept].to_vec();
        Ok((self.encode_clip(store, &clip)?, labels))
    }
}

#[derive(Debug, Clone)]
pub struct AudioBranchModel {
    pub config: AudioBranchConfig,
    store: ParamStore,
    net: AudioNet,
}

pub const CHECKPOINT_KIND: &str = "audio_branch";

impl AudioBranchModel {
    pub fn new(config: AudioBranchConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let encoder = ToyAudioEncoder::new(&mut store, "encoder", config.d_model, &mut rng);
        let refine = SelfAttentionLayer::new(&mut store, "refine", config.d_model, config.heads, &mut rng);
        let head = Linear::new(&mut store, "head", config.d_model, 1, true, &mut rng);
        let net = AudioNet {
            d_model: config.d_model,
            encoder,
            refine,
            head,
        };
        Self { config, store, net }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder_params(&self) -> [ParamId; 2] {
        self.net.encoder.params()
    }

    /// Encoder features of a clip's real span (padding columns excluded).
    pub fn encode_clip(&self, clip: &AudioClip) -> Result<Mat> {
        self.net.encode_clip(&self.store, clip)
    }

    /// Per-frame scores from precomputed encoder features.
    pub fn scores_from_features(&self, features: &Mat, n_frames: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let z = self.net.logits(&self.store, &mut tape, features, n_frames)?;
        Ok(tape.value(z).iter().map(|&v| sigmoid(v)).collect())
    }

    pub fn forward(&self, clip: &AudioClip, n_frames: usize) -> Result<Vec<f64>> {
        if n_frames == 0 {
            return Err(Error::Validation("n_frames must be at least 1".into()));
        }
        self.scores_from_features(&self.encode_clip(clip)?, n_frames)
    }

    /// Mean per-frame BCE of one feature sequence and its gradients.
    pub fn loss_and_grads(&self, features: &Mat, labels: &[u8]) -> Result<(f64, Grads)> {
        self.net.loss_and_grads(&self.store, features, labels)
    }

    pub fn loss(&self, features: &Mat, labels: &[u8]) -> Result<f64> {
        self.net.loss(&self.store, features, labels)
    }

    pub fn predict(&self, segment: &Segment) -> Result<ScoreTrack> {
        let clip = slice_clip(&segment.audio, frame_span(segment));
        let scores = self.forward(&clip, segment.frames.len())?;
        ScoreTrack::new(segment.id.clone(), scores)
    }

    /// SGD on mean per-frame BCE. Under cropping only frames lying wholly
    /// inside the kept audio contribute.
    pub fn train(&mut self, segments: &[Segment], hp: &AudioTrainConfig) -> Result<Vec<f64>> {
        if segments.is_empty() {
            return Err(Error::Config("audio training set is empty".into()));
        }
        let augmenting = hp.augment.crop_p > 0.0 || hp.augment.noise_p > 0.0;
        let cached: Vec<Option<Mat>> = if augmenting {
            vec![None; segments.len()]
        } else {
            segments
                .iter()
                .map(|s| self.encode_clip(&slice_clip(&s.audio, frame_span(s))).map(Some))
                .collect::<Result<_>>()?
        };
        let net = &self.net;
        fit(&mut self.store, segments.len(), &hp.optim, |store, i, rng| {
            let seg = &segments[i];
            match &cached[i] {
                Some(f) => net.loss_and_grads(store, f, &seg.labels()),
                None => {
                    let (f, labels) = net.augmented_features(store, seg, &hp.augment, rng)?;
                    net.loss_and_grads(store, &f, &labels)
                }
            }
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, CHECKPOINT_KIND, &self.config, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = read_checkpoint::<AudioBranchConfig>(path, CHECKPOINT_KIND)?;
        let mut model = Self::new(ckpt.config);
        model.store.load_record(&ckpt.params)?;
        Ok(model)
    }
}

fn frame_period(seg: &Segment) -> f64 {
    1.0 / seg.frame_rate
}

/// Sample range covered by a segment's frames.
pub fn frame_span(seg: &Segment) -> Range<usize> {
    frame_samples(seg, 0..seg.frames.len())
}

/// Sample range covered by a run of frames.
pub fn frame_samples(seg: &Segment, frames: Range<usize>) -> Range<usize> {
    let sr = f64::from(seg.audio.sample_rate);
    let n = seg.audio.samples.len();
    let start = ((seg.frames[frames.start].timestamp * sr).round() as usize).min(n - 1);
    let end_t = seg.frames[frames.end - 1].timestamp + frame_period(seg);
    let end = ((end_t * sr).round() as usize).clamp(start + 1, n);
    start..end
}

/// Frames whose whole period lies inside `[start, end)` samples.
fn frames_inside(seg: &Segment, start: usize, end: usize) -> Option<Range<usize>> {
    let sr = f64::from(seg.audio.sample_rate);
    let (t0, t1) = (start as f64 / sr, end as f64 / sr);
    let eps = 0.5 / sr;
    let inside: Vec<usize> = seg
        .frames
        .iter()
        .filter(|f| f.timestamp >= t0 - eps && f.timestamp + frame_period(seg) <= t1 + eps)
        .map(|f| f.index)
        .collect();
    let first = *inside.first()?;
    let last = *inside.last()?;
    let feats = real_feature_count(frame_samples(seg, first..last + 1).len());
    (feats >= last + 1 - first).then_some(first..last + 1)
}

fn slice_clip(clip: &AudioClip, range: Range<usize>) -> AudioClip {
    AudioClip {
        samples: clip.samples[range].to_vec(),
        sample_rate: clip.sample_rate,
    }
}
