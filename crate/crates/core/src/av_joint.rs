//! Early-fusion baseline: audio features pooled to the 15 window positions,
//! 15 vision tokens, both sequences concatenated in time with a modality
//! embedding, a per-token MLP, a CLS token, two self-attention layers and a
//! head on the CLS output.

use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio_branch::{adaptive_windows, real_feature_count, AudioEncoder, ToyAudioEncoder, FEATURES_PER_SECOND};
use crate::audiofeat::log_mel;
use crate::error::{Error, Result};
use crate::nn::{
    fit, read_checkpoint, save_checkpoint, sigmoid, sinusoidal_positions, Grads, Linear, Mat,
    ParamId, ParamStore, SelfAttentionLayer, Tape, Var,
};
use crate::quality::{filter_samples, QualityTrack};
use crate::types::{AudioClip, FrameWindow, ScoreTrack, Segment, WINDOW_CENTER, WINDOW_LEN, WINDOW_STRIDE_S};
use crate::vision_branch::{blank_pixels, frame_pixels, preprocess, window_layout, ToyImageEncoder, VisionTrainConfig};

/// Tokens after fusion: CLS plus 15 audio and 15 vision tokens.
pub const SEQUENCE_LEN: usize = 2 * WINDOW_LEN + 1;
/// Audio covered by a window: 15 positions 0.5 s apart, each 0.5 s wide.
pub const WINDOW_SPAN_S: f64 = WINDOW_LEN as f64 * WINDOW_STRIDE_S;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AvJointConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Output width of both encoders.
    pub feature_dim: usize,
    /// Hidden width of the per-token fusion MLP.
    pub mlp_hidden: usize,
    pub image_size: usize,
    pub conv_channels: (usize, usize),
    pub seed: u64,
}

impl Default for AvJointConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            feature_dim: 64,
            mlp_hidden: 64,
            image_size: 32,
            conv_channels: (4, 8),
            seed: 7,
        }
    }
}

/// Vision content of a window: precomputed features or pixels.
enum VisionInput<'a> {
    Features(&'a Mat),
    Pixels(&'a [Vec<f64>]),
}

#[derive(Debug, Clone)]
struct AvNet {
    audio_encoder: ToyAudioEncoder,
    image_encoder: ToyImageEncoder,
    modality: ParamId,
    mlp_in: Linear,
    mlp_out: Linear,
    cls: ParamId,
    layers: [SelfAttentionLayer; 2],
    head: Linear,
}

impl AvNet {
    fn logit(&self, store: &ParamStore, tape: &mut Tape, audio: &Mat, vision: &VisionInput) -> Var {
        let vision = match vision {
            VisionInput::Features(f) => tape.constant((*f).clone()),
            VisionInput::Pixels(p) => {
                let rows: Vec<Var> = p
                    .iter()
                    .map(|px| self.image_encoder.forward(tape, store, px))
                    .collect();
                tape.concat_rows(&rows)
            }
        };
        let feat = self.audio_encoder.dim();
        let pe = sinusoidal_positions(WINDOW_LEN, feat);
        let audio = tape.constant(audio + &pe);
        let pe = tape.constant(pe);
        let vision = tape.add(vision, pe);
        let modality = tape.param(store, self.modality);
        let audio_type = tape.rows(modality, 0..1);
        let vision_type = tape.rows(modality, 1..2);
        let audio = tape.add_row(audio, audio_type);
        let vision = tape.add_row(vision, vision_type);
        let tokens = tape.concat_rows(&[audio, vision]);
        let h = self.mlp_in.forward(tape, store, tokens);
        let h = tape.gelu(h);
        let h = self.mlp_out.forward(tape, store, h);
        let cls = tape.param(store, self.cls);
        let mut x = tape.concat_rows(&[cls, h]);
        for layer in &self.layers {
            x = layer.forward(tape, store, x, None);
        }
        let out = tape.rows(x, 0..1);
        self.head.forward(tape, store, out)
    }

    fn loss_and_grads(
        &self,
        store: &ParamStore,
        audio: &Mat,
        vision: &VisionInput,
        label: u8,
    ) -> (f64, Grads) {
        let mut tape = Tape::new();
        let z = self.logit(store, &mut tape, audio, vision);
        let loss = tape.bce_with_logits(z, &[f64::from(label)], &[1.0]);
        (tape.scalar(loss), tape.backward(loss, store.len()))
    }
}

#[derive(Debug, Clone)]
pub struct AvJointModel {
    pub config: AvJointConfig,
    store: ParamStore,
    net: AvNet,
}

pub const CHECKPOINT_KIND: &str = "av_joint";
const IMAGE_ENCODER: &str = "image_encoder";

impl AvJointModel {
    pub fn new(config: AvJointConfig) -> Result<Self> {
        if config.heads == 0 || !config.d_model.is_multiple_of(config.heads) {
            return Err(Error::Config(format!(
                "d_model {} does not split into {} heads",
                config.d_model, config.heads
            )));
        }
        if config.image_size == 0 || !config.image_size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of 4",
                config.image_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let f = config.feature_dim;
        let d = config.d_model;
        let audio_encoder = ToyAudioEncoder::new(&mut store, "audio_encoder", f, &mut rng);
        let image_encoder = ToyImageEncoder::new(
            &mut store,
            IMAGE_ENCODER,
            config.image_size,
            config.conv_channels,
            f,
            &mut rng,
        );
        let modality = store.randn("modality", (2, f), 0.1, true, &mut rng);
        let mlp_in = Linear::new(&mut store, "mlp_in", f, config.mlp_hidden, true, &mut rng);
        let mlp_out = Linear::new(&mut store, "mlp_out", config.mlp_hidden, d, true, &mut rng);
        let cls = store.randn("cls", (1, d), 0.02, true, &mut rng);
        let layers = [
            SelfAttentionLayer::new(&mut store, "attn0", d, config.heads, &mut rng),
            SelfAttentionLayer::new(&mut store, "attn1", d, config.heads, &mut rng),
        ];
        let head = Linear::new(&mut store, "head", d, 1, true, &mut rng);
        let net = AvNet {
            audio_encoder,
            image_encoder,
            modality,
            mlp_in,
            mlp_out,
            cls,
            layers,
            head,
        };
        Ok(Self { config, store, net })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn set_image_encoder_trainable(&mut self, trainable: bool) {
        self.store
            .set_trainable_where(|n| n.starts_with(&format!("{IMAGE_ENCODER}.")), trainable);
    }

    pub fn audio_encoder_params(&self) -> [ParamId; 2] {
        self.net.audio_encoder.params()
    }

    /// The 15 audio tokens of a clip spanning one window: encoder features
    /// average-pooled into 15 equal bins.
    pub fn audio_tokens(&self, clip: &AudioClip) -> Result<Mat> {
        let mel = log_mel(clip)?;
        let n = real_feature_count(clip.samples.len()).max(WINDOW_LEN);
        let feats = self.net.audio_encoder.encode(&self.store, &mel, n);
        Ok(pool_ranges(&feats, &adaptive_windows(n, WINDOW_LEN)?))
    }

    /// Zero-crop pixels at positions outside the segment or without a box.
    fn window_pixels(&self, window: &FrameWindow) -> Vec<Vec<f64>> {
        let size = self.config.image_size;
        window
            .crops
            .iter()
            .zip(window.mask)
            .map(|(c, real)| {
                if real {
                    preprocess(c, size)
                } else {
                    preprocess(&crate::types::Image::zeros(c.height, c.width, c.channels), size)
                }
            })
            .collect()
    }

    /// Score of the window's target frame; `clip` is the audio of the
    /// window's 7.5 s extent (see [`window_clip`]).
    pub fn forward(&self, window: &FrameWindow, clip: &AudioClip) -> Result<f64> {
        let audio = self.audio_tokens(clip)?;
        let pixels = self.window_pixels(window);
        let mut tape = Tape::new();
        let z = self.net.logit(&self.store, &mut tape, &audio, &VisionInput::Pixels(&pixels));
        Ok(sigmoid(tape.scalar(z)))
    }

    /// Length of the fused token sequence fed to attention.
    pub fn sequence_len(&self, window: &FrameWindow, clip: &AudioClip) -> Result<usize> {
        let audio = self.audio_tokens(clip)?;
        Ok(1 + audio.nrows() + window.crops.len())
    }

    pub fn loss_and_grads(&self, window: &FrameWindow, clip: &AudioClip, label: u8) -> Result<(f64, Grads)> {
        self.token_loss_and_grads(&self.audio_tokens(clip)?, window, label)
    }

    pub fn loss(&self, window: &FrameWindow, clip: &AudioClip, label: u8) -> Result<f64> {
        self.token_loss(&self.audio_tokens(clip)?, window, label)
    }

    /// [`Self::loss_and_grads`] with the audio tokens already computed.
    pub fn token_loss_and_grads(&self, audio: &Mat, window: &FrameWindow, label: u8) -> Result<(f64, Grads)> {
        check_tokens(audio)?;
        let pixels = self.window_pixels(window);
        Ok(self
            .net
            .loss_and_grads(&self.store, audio, &VisionInput::Pixels(&pixels), label))
    }

    /// [`Self::loss`] with the audio tokens already computed.
    pub fn token_loss(&self, audio: &Mat, window: &FrameWindow, label: u8) -> Result<f64> {
        check_tokens(audio)?;
        let pixels = self.window_pixels(window);
        let mut tape = Tape::new();
        let z = self.net.logit(&self.store, &mut tape, audio, &VisionInput::Pixels(&pixels));
        let loss = tape.bce_with_logits(z, &[f64::from(label)], &[1.0]);
        Ok(tape.scalar(loss))
    }

    pub fn predict(&self, segment: &Segment) -> Result<ScoreTrack> {
        let cache = SegmentCache::new(self, segment, true)?;
        let scores = (0..segment.frames.len())
            .map(|t| {
                let audio = cache.audio_tokens(segment, t);
                let vision = cache.vision_features(segment, t);
                let mut tape = Tape::new();
                let z = self
                    .net
                    .logit(&self.store, &mut tape, &audio, &VisionInput::Features(&vision));
                sigmoid(tape.scalar(z))
            })
            .collect();
        ScoreTrack::new(segment.id.clone(), scores)
    }

    /// SGD on target-frame BCE. Window quality filtering and fine-tuning
    /// follow the vision branch; the audio encoder always stays frozen.
    pub fn train(
        &mut self,
        segments: &[Segment],
        qualities: &[QualityTrack],
        hp: &VisionTrainConfig,
    ) -> Result<Vec<f64>> {
        if segments.len() != qualities.len() {
            return Err(Error::Alignment(format!(
                "{} segments but {} quality tracks",
                segments.len(),
                qualities.len()
            )));
        }
        if hp.target_stride == 0 {
            return Err(Error::Config("target_stride must be at least 1".into()));
        }
        let mut candidates = Vec::new();
        for (si, (seg, qt)) in segments.iter().zip(qualities).enumerate() {
            if qt.segment_id != seg.id || qt.window_quality.len() != seg.frames.len() {
                return Err(Error::Alignment(format!(
                    "quality track {} does not match segment {}",
                    qt.segment_id, seg.id
                )));
            }
            for t in (0..seg.frames.len()).step_by(hp.target_stride) {
                candidates.push(((si, t), qt.window_quality[t]));
            }
        }
        let samples = filter_samples(candidates, hp.tau)?;
        if samples.is_empty() {
            return Err(Error::Config(format!(
                "no training window has sample quality above tau = {}",
                hp.tau
            )));
        }
        self.set_image_encoder_trainable(hp.fine_tune);
        let caches = segments
            .iter()
            .map(|s| SegmentCache::new(self, s, !hp.fine_tune))
            .collect::<Result<Vec<_>>>()?;
        let net = &self.net;
        let result = fit(&mut self.store, samples.len(), &hp.optim, |store, i, _| {
            let ((si, t), _) = samples[i];
            let seg = &segments[si];
            let cache = &caches[si];
            let audio = cache.audio_tokens(seg, t);
            let label = seg.frames[t].label;
            Ok(if hp.fine_tune {
                let pixels = cache.vision_pixels(seg, t);
                net.loss_and_grads(store, &audio, &VisionInput::Pixels(&pixels), label)
            } else {
                let vision = cache.vision_features(seg, t);
                net.loss_and_grads(store, &audio, &VisionInput::Features(&vision), label)
            })
        });
        self.set_image_encoder_trainable(false);
        result
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, CHECKPOINT_KIND, &self.config, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = read_checkpoint::<AvJointConfig>(path, CHECKPOINT_KIND)?;
        let mut model = Self::new(ckpt.config)?;
        model.store.load_record(&ckpt.params)?;
        Ok(model)
    }
}

fn pool_ranges(features: &Mat, windows: &[Range<usize>]) -> Mat {
    let mut out = Mat::zeros((windows.len(), features.ncols()));
    for (i, w) in windows.iter().enumerate() {
        let mean = features
            .slice(ndarray::s![w.clone(), ..])
            .mean_axis(ndarray::Axis(0))
            .expect("non-empty window");
        out.row_mut(i).assign(&mean);
    }
    out
}

fn check_tokens(audio: &Mat) -> Result<()> {
    if audio.nrows() != WINDOW_LEN {
        return Err(Error::Validation(format!(
            "expected {WINDOW_LEN} audio tokens, got {}",
            audio.nrows()
        )));
    }
    Ok(())
}

/// Audio of the 7.5 s window centered on frame `t`, zero outside the
/// segment's audio.
pub fn window_clip(segment: &Segment, t: usize) -> AudioClip {
    let sr = segment.audio.sample_rate;
    let len = (WINDOW_SPAN_S * f64::from(sr)).round() as usize;
    let start = window_start_sample(segment, t);
    let samples = (0..len as i64)
        .map(|k| {
            let i = start + k;
            if i >= 0 && (i as usize) < segment.audio.samples.len() {
                segment.audio.samples[i as usize]
            } else {
                0.0
            }
        })
        .collect();
    AudioClip {
        samples,
        sample_rate: sr,
    }
}

fn window_start_sample(segment: &Segment, t: usize) -> i64 {
    let sr = f64::from(segment.audio.sample_rate);
    let start_s = segment.frames[t].timestamp - (WINDOW_CENTER as f64 + 0.5) * WINDOW_STRIDE_S;
    (start_s * sr).round() as i64
}

/// Encoder features of a whole segment plus per-frame vision inputs, so
/// that windows are assembled without re-encoding.
struct SegmentCache {
    /// Features of the segment audio zero-padded by half a window on both
    /// sides, at the encoder rate.
    audio: Mat,
    pad_s: f64,
    pixels: Vec<Vec<f64>>,
    blank: Vec<f64>,
    features: Option<(Vec<Vec<f64>>, Vec<f64>)>,
}

impl SegmentCache {
    fn new(model: &AvJointModel, segment: &Segment, with_features: bool) -> Result<Self> {
        let sr = segment.audio.sample_rate;
        let pad_s = WINDOW_SPAN_S / 2.0;
        let pad = (pad_s * f64::from(sr)).round() as usize;
        let mut samples = vec![0.0f32; pad];
        samples.extend_from_slice(&segment.audio.samples);
        samples.extend(std::iter::repeat_n(0.0f32, pad));
        let clip = AudioClip {
            samples,
            sample_rate: sr,
        };
        let mel = log_mel(&clip)?;
        let n = real_feature_count(clip.samples.len());
        let audio = model.net.audio_encoder.encode(&model.store, &mel, n);
        let size = model.config.image_size;
        let pixels = frame_pixels(segment, size);
        let blank = blank_pixels(segment, size);
        let features = with_features.then(|| {
            let enc = |p: &Vec<f64>| model.net.image_encoder.encode(&model.store, p);
            (pixels.iter().map(enc).collect(), enc(&blank))
        });
        Ok(Self {
            audio,
            pad_s,
            pixels,
            blank,
            features,
        })
    }

    /// Token `k` averages features over `[t_k - 0.25 s, t_k + 0.25 s)`
    /// with `t_k = t + (k - 7) * 0.5 s`, clamped to the encoded span.
    fn audio_tokens(&self, segment: &Segment, t: usize) -> Mat {
        let rate = FEATURES_PER_SECOND as f64;
        let n = self.audio.nrows();
        let center = segment.frames[t].timestamp + self.pad_s;
        let windows: Vec<Range<usize>> = (0..WINDOW_LEN)
            .map(|k| {
                let tk = center + (k as f64 - WINDOW_CENTER as f64) * WINDOW_STRIDE_S;
                let lo = (((tk - WINDOW_STRIDE_S / 2.0) * rate).round().max(0.0) as usize).min(n - 1);
                let hi = (((tk + WINDOW_STRIDE_S / 2.0) * rate).round() as usize).clamp(lo + 1, n);
                lo..hi
            })
            .collect();
        pool_ranges(&self.audio, &windows)
    }

    fn vision_pixels(&self, segment: &Segment, t: usize) -> Vec<Vec<f64>> {
        let (idx, mask) = window_layout(segment, t);
        idx.iter()
            .zip(mask)
            .map(|(&i, real)| if real { self.pixels[i].clone() } else { self.blank.clone() })
            .collect()
    }

    fn vision_features(&self, segment: &Segment, t: usize) -> Mat {
        let (idx, mask) = window_layout(segment, t);
        let (feats, blank) = self.features.as_ref().expect("features precomputed");
        let dim = blank.len();
        Mat::from_shape_fn((WINDOW_LEN, dim), |(p, j)| {
            if mask[p] {
                feats[idx[p]][j]
            } else {
                blank[j]
            }
        })
    }
}
