//! Vision-only model: each crop of a 15-frame window is encoded on its own,
//! a learnable CLS token is prepended, two self-attention layers mix the
//! sequence with padded positions masked out, and a head scores the CLS
//! output, optionally joined with a projected face-quality feature.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    fit, read_checkpoint, save_checkpoint, sigmoid, sinusoidal_positions, Grads, Linear, Mat,
    ParamId, ParamStore, SelfAttentionLayer, Tape, TrainConfig, Var,
};
use crate::quality::{filter_samples, quantize_quality, QualityTrack};
use crate::types::{window_positions, FrameWindow, Image, ScoreTrack, Segment, WINDOW_LEN, WINDOW_STRIDE_S};

/// Grayscale `size x size` copy of a crop with values in `[-0.5, 0.5]`.
/// Shrinking averages every source pixel overlapping a target pixel;
/// enlarging samples the nearest source pixel.
pub fn preprocess(image: &Image, size: usize) -> Vec<f64> {
    let (h, w) = (image.height, image.width);
    let gray = |y: usize, x: usize| {
        (0..image.channels).map(|c| image.get(y, x, c)).sum::<f64>() / image.channels as f64
    };
    let mut out = Vec::with_capacity(size * size);
    for i in 0..size {
        let (y0, y1) = span(i, size, h);
        for j in 0..size {
            let (x0, x1) = span(j, size, w);
            let mut sum = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    sum += gray(y, x);
                }
            }
            out.push(sum / ((y1 - y0) * (x1 - x0)) as f64 - 0.5);
        }
    }
    out
}

/// Source index range covered by target cell `i` of `n` over `len` pixels.
fn span(i: usize, n: usize, len: usize) -> (usize, usize) {
    let lo = i * len / n;
    let hi = ((i + 1) * len).div_ceil(n).max(lo + 1).min(len);
    (lo.min(len - 1), hi)
}

/// Two conv(3x3) + tanh + 2x2 average-pool stages, then an affine map and
/// `tanh` to a `dim`-wide feature.
#[derive(Debug, Clone)]
pub struct ToyImageEncoder {
    pub size: usize,
    pub channels: (usize, usize),
    pub dim: usize,
    conv1: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
    fc: Linear,
}

impl ToyImageEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        size: usize,
        channels: (usize, usize),
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(size.is_multiple_of(4) && size > 0, "image size must be a positive multiple of 4");
        let (c1, c2) = channels;
        let conv = |store: &mut ParamStore, rng: &mut _, tag: &str, c_in: usize, c_out: usize| {
            let w = store.randn(
                format!("{name}.{tag}.w"),
                (c_out, c_in * 9),
                1.0 / ((c_in * 9) as f64).sqrt(),
                false,
                rng,
            );
            let b = store.zeros(format!("{name}.{tag}.b"), (c_out, 1), false);
            (w, b)
        };
        let conv1 = conv(store, rng, "conv1", 1, c1);
        let conv2 = conv(store, rng, "conv2", c1, c2);
        let flat = c2 * (size / 4) * (size / 4);
        let fc = Linear::new(store, &format!("{name}.fc"), flat, dim, false, rng);
        Self {
            size,
            channels,
            dim,
            conv1,
            conv2,
            fc,
        }
    }

    /// `1 x dim` feature of a preprocessed image.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, pixels: &[f64]) -> Var {
        let s = self.size;
        let x = tape.constant(Mat::from_shape_vec((1, s * s), pixels.to_vec()).expect("pixel count"));
        let stage = |tape: &mut Tape, x: Var, (w, b): (ParamId, ParamId), side: usize| {
            let w = tape.param(store, w);
            let b = tape.param(store, b);
            let y = tape.conv3x3(x, w, b, side, side);
            let y = tape.tanh(y);
            tape.avg_pool2(y, side, side)
        };
        let x = stage(tape, x, self.conv1, s);
        let x = stage(tape, x, self.conv2, s / 2);
        let x = tape.flatten(x);
        let x = self.fc.forward(tape, store, x);
        tape.tanh(x)
    }

    /// Feature values without recording gradients.
    pub fn encode(&self, store: &ParamStore, pixels: &[f64]) -> Vec<f64> {
        let mut tape = Tape::new();
        let v = self.forward(&mut tape, store, pixels);
        tape.value(v).iter().copied().collect()
    }
}

/// How face quality enters the vision head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QualityMode {
    #[default]
    None,
    Scalar,
    Quantized {
        n_bins: usize,
    },
}

impl QualityMode {
    fn input_width(self) -> Option<usize> {
        match self {
            QualityMode::None => None,
            QualityMode::Scalar => Some(1),
            QualityMode::Quantized { n_bins } => Some(n_bins),
        }
    }

    fn encode(self, q: f64) -> Result<Option<Mat>> {
        Ok(match self {
            QualityMode::None => None,
            QualityMode::Scalar => Some(Mat::from_elem((1, 1), q)),
            QualityMode::Quantized { n_bins } => {
                let v = quantize_quality(q, n_bins)?;
                Some(Mat::from_shape_vec((1, n_bins), v).expect("one-hot width"))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisionBranchConfig {
    pub d_model: usize,
    pub heads: usize,
    pub image_size: usize,
    pub conv_channels: (usize, usize),
    /// Encoder output width before the trainable token projection.
    pub feature_dim: usize,
    pub quality_mode: QualityMode,
    pub quality_dim: usize,
    pub seed: u64,
}

impl Default for VisionBranchConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            image_size: 32,
            conv_channels: (4, 8),
            feature_dim: 64,
            quality_mode: QualityMode::None,
            quality_dim: 8,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisionTrainConfig {
    pub optim: TrainConfig,
    /// Train the image encoder too.
    pub fine_tune: bool,
    /// Minimum sample quality (strict) for a window to be trained on.
    pub tau: f64,
    /// Use every `target_stride`-th frame of a segment as a training target.
    pub target_stride: usize,
}

impl Default for VisionTrainConfig {
    fn default() -> Self {
        Self {
            optim: TrainConfig::default(),
            fine_tune: false,
            tau: 0.0,
            target_stride: 1,
        }
    }
}

/// Window content handed to the network: precomputed encoder features or
/// preprocessed pixels that still go through the encoder.
pub enum WindowInput<'a> {
    Features(&'a Mat),
    Pixels(&'a [Vec<f64>]),
}

#[derive(Debug, Clone)]
struct VisionNet {
    config: VisionBranchConfig,
    encoder: ToyImageEncoder,
    embed: Linear,
    cls: ParamId,
    layers: [SelfAttentionLayer; 2],
    quality_proj: Option<Linear>,
    head: Linear,
}

impl VisionNet {
    fn tokens(&self, store: &ParamStore, tape: &mut Tape, input: &WindowInput) -> Var {
        match input {
            WindowInput::Features(f) => tape.constant((*f).clone()),
            WindowInput::Pixels(p) => {
                let rows: Vec<Var> = p.iter().map(|px| self.encoder.forward(tape, store, px)).collect();
                tape.concat_rows(&rows)
            }
        }
    }

    fn logit(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        input: &WindowInput,
        mask: &[bool; WINDOW_LEN],
        q: f64,
    ) -> Result<Var> {
        let feats = self.tokens(store, tape, input);
        let x = self.embed.forward(tape, store, feats);
        let pe = tape.constant(sinusoidal_positions(WINDOW_LEN, self.config.d_model));
        let x = tape.add(x, pe);
        let cls = tape.param(store, self.cls);
        let mut x = tape.concat_rows(&[cls, x]);
        let mut key_mask = Vec::with_capacity(WINDOW_LEN + 1);
        key_mask.push(true);
        key_mask.extend_from_slice(mask);
        for layer in &self.layers {
            x = layer.forward(tape, store, x, Some(&key_mask));
        }
        let mut out = tape.rows(x, 0..1);
        if let (Some(proj), Some(qin)) = (&self.quality_proj, self.config.quality_mode.encode(q)?) {
            let qin = tape.constant(qin);
            let qf = proj.forward(tape, store, qin);
            out = tape.concat_cols(&[out, qf]);
        }
        Ok(self.head.forward(tape, store, out))
    }

    fn loss_and_grads(
        &self,
        store: &ParamStore,
        input: &WindowInput,
        mask: &[bool; WINDOW_LEN],
        q: f64,
        label: u8,
    ) -> Result<(f64, Grads)> {
        let mut tape = Tape::new();
        let z = self.logit(store, &mut tape, input, mask, q)?;
        let loss = tape.bce_with_logits(z, &[f64::from(label)], &[1.0]);
        Ok((tape.scalar(loss), tape.backward(loss, store.len())))
    }
}

#[derive(Debug, Clone)]
pub struct VisionBranchModel {
    pub config: VisionBranchConfig,
    store: ParamStore,
    net: VisionNet,
}

pub const CHECKPOINT_KIND: &str = "vision_branch";
const ENCODER: &str = "encoder";

impl VisionBranchModel {
    pub fn new(config: VisionBranchConfig) -> Result<Self> {
        if let QualityMode::Quantized { n_bins: 0 } = config.quality_mode {
            return Err(Error::Config("quantized quality needs at least one bin".into()));
        }
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
        let d = config.d_model;
        let encoder = ToyImageEncoder::new(
            &mut store,
            ENCODER,
            config.image_size,
            config.conv_channels,
            config.feature_dim,
            &mut rng,
        );
        let embed = Linear::new(&mut store, "embed", config.feature_dim, d, true, &mut rng);
        let cls = store.randn("cls", (1, d), 0.02, true, &mut rng);
        let layers = [
            SelfAttentionLayer::new(&mut store, "attn0", d, config.heads, &mut rng),
            SelfAttentionLayer::new(&mut store, "attn1", d, config.heads, &mut rng),
        ];
        let quality_proj = config
            .quality_mode
            .input_width()
            .map(|w| Linear::new(&mut store, "quality_proj", w, config.quality_dim, true, &mut rng));
        let head_in = d + quality_proj.map_or(0, |_| config.quality_dim);
        let head = Linear::new(&mut store, "head", head_in, 1, true, &mut rng);
        let net = VisionNet {
            config: config.clone(),
            encoder,
            embed,
            cls,
            layers,
            quality_proj,
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

    pub fn encoder(&self) -> &ToyImageEncoder {
        &self.net.encoder
    }

    /// Marks the image encoder trainable (fine-tuning) or frozen.
    pub fn set_encoder_trainable(&mut self, trainable: bool) {
        self.store
            .set_trainable_where(|n| n.starts_with(&format!("{ENCODER}.")), trainable);
    }

    pub fn preprocess_window(&self, window: &FrameWindow) -> Vec<Vec<f64>> {
        window
            .crops
            .iter()
            .map(|c| preprocess(c, self.config.image_size))
            .collect()
    }

    pub fn forward(&self, window: &FrameWindow, q: f64) -> Result<f64> {
        check_quality(q)?;
        let pixels = self.preprocess_window(window);
        self.forward_input(&WindowInput::Pixels(&pixels), &window.mask, q)
    }

    pub fn forward_input(&self, input: &WindowInput, mask: &[bool; WINDOW_LEN], q: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let z = self.net.logit(&self.store, &mut tape, input, mask, q)?;
        Ok(sigmoid(tape.scalar(z)))
    }

    /// BCE of one window against its target-frame label, with gradients.
    pub fn loss_and_grads(&self, window: &FrameWindow, q: f64, label: u8) -> Result<(f64, Grads)> {
        let pixels = self.preprocess_window(window);
        self.net
            .loss_and_grads(&self.store, &WindowInput::Pixels(&pixels), &window.mask, q, label)
    }

    pub fn loss(&self, window: &FrameWindow, q: f64, label: u8) -> Result<f64> {
        let pixels = self.preprocess_window(window);
        let mut tape = Tape::new();
        let z = self
            .net
            .logit(&self.store, &mut tape, &WindowInput::Pixels(&pixels), &window.mask, q)?;
        let loss = tape.bce_with_logits(z, &[f64::from(label)], &[1.0]);
        Ok(tape.scalar(loss))
    }

    /// Scores every frame of a segment, each as the target of its window.
    pub fn predict(&self, segment: &Segment, quality: &QualityTrack) -> Result<ScoreTrack> {
        check_track(segment, quality)?;
        let frames = SegmentFrames::new(self, segment, true);
        let scores = (0..segment.frames.len())
            .map(|t| {
                let (feats, mask) = frames.window_features(segment, t);
                self.forward_input(&WindowInput::Features(&feats), &mask, quality.window_quality[t])
            })
            .collect::<Result<Vec<_>>>()?;
        ScoreTrack::new(segment.id.clone(), scores)
    }

    /// SGD on window-level BCE over targets whose sample quality exceeds
    /// `tau`. The encoder is trained only with `fine_tune`.
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
            check_track(seg, qt)?;
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
        log::info!("vision training on {} windows (tau = {})", samples.len(), hp.tau);

        self.set_encoder_trainable(hp.fine_tune);
        let frames: Vec<SegmentFrames> = segments
            .iter()
            .map(|s| SegmentFrames::new(self, s, !hp.fine_tune))
            .collect();
        let net = &self.net;
        let result = fit(&mut self.store, samples.len(), &hp.optim, |store, i, _| {
            let ((si, t), q) = samples[i];
            let seg = &segments[si];
            let label = seg.frames[t].label;
            if hp.fine_tune {
                let (pixels, mask) = frames[si].window_pixels(seg, t);
                net.loss_and_grads(store, &WindowInput::Pixels(&pixels), &mask, q, label)
            } else {
                let (feats, mask) = frames[si].window_features(seg, t);
                net.loss_and_grads(store, &WindowInput::Features(&feats), &mask, q, label)
            }
        });
        self.set_encoder_trainable(false);
        result
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, CHECKPOINT_KIND, &self.config, &self.store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = read_checkpoint::<VisionBranchConfig>(path, CHECKPOINT_KIND)?;
        let mut model = Self::new(ckpt.config)?;
        model.store.load_record(&ckpt.params)?;
        Ok(model)
    }
}

fn check_quality(q: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Validation(format!("sample quality {q} outside [0, 1]")));
    }
    Ok(())
}

fn check_track(segment: &Segment, quality: &QualityTrack) -> Result<()> {
    if quality.segment_id != segment.id || quality.window_quality.len() != segment.frames.len() {
        return Err(Error::Alignment(format!(
            "quality track {} ({} frames) does not match segment {} ({} frames)",
            quality.segment_id,
            quality.window_quality.len(),
            segment.id,
            segment.frames.len()
        )));
    }
    Ok(())
}

/// Per-frame preprocessed crops of a segment and, for a frozen encoder,
/// their features. Box-less frames use an all-zero crop.
struct SegmentFrames {
    pixels: Vec<Vec<f64>>,
    features: Option<Vec<Vec<f64>>>,
}

impl SegmentFrames {
    fn new(model: &VisionBranchModel, segment: &Segment, with_features: bool) -> Self {
        let pixels = frame_pixels(segment, model.config.image_size);
        let features = with_features.then(|| {
            pixels
                .iter()
                .map(|p| model.net.encoder.encode(&model.store, p))
                .collect()
        });
        Self { pixels, features }
    }

    fn window_pixels(&self, segment: &Segment, t: usize) -> (Vec<Vec<f64>>, [bool; WINDOW_LEN]) {
        let (idx, mask) = window_layout(segment, t);
        (idx.iter().map(|&i| self.pixels[i].clone()).collect(), mask)
    }

    fn window_features(&self, segment: &Segment, t: usize) -> (Mat, [bool; WINDOW_LEN]) {
        let (idx, mask) = window_layout(segment, t);
        let feats = self.features.as_ref().expect("features precomputed");
        let dim = feats[0].len();
        let m = Mat::from_shape_fn((WINDOW_LEN, dim), |(p, j)| feats[idx[p]][j]);
        (m, mask)
    }
}

/// Preprocessed crop of every frame; box-less frames get a blank crop.
pub(crate) fn frame_pixels(segment: &Segment, size: usize) -> Vec<Vec<f64>> {
    let blank = blank_pixels(segment, size);
    segment
        .frames
        .iter()
        .map(|f| f.crop.as_ref().map_or_else(|| blank.clone(), |c| preprocess(c, size)))
        .collect()
}

/// Preprocessed all-zero crop with the segment's crop geometry.
pub(crate) fn blank_pixels(segment: &Segment, size: usize) -> Vec<f64> {
    let (h, w, c) = segment
        .frames
        .iter()
        .find_map(|f| f.crop.as_ref())
        .map_or((size, size, 1), |c| (c.height, c.width, c.channels));
    preprocess(&Image::zeros(h, w, c), size)
}

/// Source frames and mask of the window around `t`, matching
/// [`crate::types::extract_window`] without copying crops.
pub(crate) fn window_layout(segment: &Segment, t: usize) -> ([usize; WINDOW_LEN], [bool; WINDOW_LEN]) {
    let (idx, inside) = window_positions(&segment.timestamps(), t, WINDOW_STRIDE_S);
    let mut mask = [false; WINDOW_LEN];
    for p in 0..WINDOW_LEN {
        mask[p] = inside[p] && segment.frames[idx[p]].crop.is_some();
    }
    (idx, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro(mode: QualityMode) -> VisionBranchModel {
        VisionBranchModel::new(VisionBranchConfig {
            d_model: 8,
            heads: 2,
            image_size: 8,
            conv_channels: (2, 2),
            feature_dim: 8,
            quality_mode: mode,
            quality_dim: 4,
            seed: 1,
        })
        .unwrap()
    }

    fn window(seed: u64, mask: [bool; WINDOW_LEN]) -> FrameWindow {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let crops = (0..WINDOW_LEN)
            .map(|_| {
                let v: Vec<f64> = (0..8 * 8 * 3).map(|_| rng.random()).collect();
                Image::from_fn(8, 8, 3, |y, x, c| v[(y * 8 + x) * 3 + c])
            })
            .collect();
        FrameWindow {
            target_index: 7,
            frame_indices: std::array::from_fn(|i| i),
            crops,
            mask,
        }
    }

    #[test]
    fn preprocess_box_filters_and_centers() {
        let img = Image::from_fn(4, 4, 1, |y, _, _| if y < 2 { 1.0 } else { 0.0 });
        assert_eq!(preprocess(&img, 2), vec![0.5, 0.5, -0.5, -0.5]);
        assert_eq!(preprocess(&img, 4).len(), 16);
        let up = preprocess(&Image::from_fn(2, 2, 1, |_, _, _| 1.0), 4);
        assert!(up.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn none_mode_ignores_quality() {
        let m = micro(QualityMode::None);
        let w = window(1, [true; WINDOW_LEN]);
        assert_eq!(m.forward(&w, 0.1).unwrap(), m.forward(&w, 0.9).unwrap());
    }

    #[test]
    fn quantized_mode_is_constant_within_a_bin() {
        let m = micro(QualityMode::Quantized { n_bins: 10 });
        let w = window(2, [true; WINDOW_LEN]);
        assert_eq!(m.forward(&w, 0.31).unwrap(), m.forward(&w, 0.39).unwrap());
        let pieces: std::collections::BTreeSet<u64> = (0..=100)
            .map(|i| m.forward(&w, i as f64 / 100.0).unwrap().to_bits())
            .collect();
        assert_eq!(pieces.len(), 10);
    }

    #[test]
    fn masked_positions_do_not_change_the_score() {
        let m = micro(QualityMode::Scalar);
        let mut mask = [true; WINDOW_LEN];
        mask[0] = false;
        mask[14] = false;
        let a = window(3, mask);
        let mut b = a.clone();
        b.crops[0] = Image::from_fn(8, 8, 3, |_, _, _| 1.0);
        b.crops[14] = window(9, mask).crops[14].clone();
        assert_eq!(m.forward(&a, 0.4).unwrap(), m.forward(&b, 0.4).unwrap());
    }

    #[test]
    fn all_padded_windows_score_identically() {
        let m = micro(QualityMode::Scalar);
        let a = window(4, [false; WINDOW_LEN]);
        let b = window(5, [false; WINDOW_LEN]);
        let sa = m.forward(&a, 0.2).unwrap();
        assert_eq!(sa, m.forward(&b, 0.2).unwrap());
        assert!(sa > 0.0 && sa < 1.0);
    }

    #[test]
    fn construction_validates_config() {
        let bad = VisionBranchConfig {
            quality_mode: QualityMode::Quantized { n_bins: 0 },
            ..Default::default()
        };
        assert!(VisionBranchModel::new(bad).is_err());
        let bad = VisionBranchConfig {
            heads: 3,
            ..Default::default()
        };
        assert!(VisionBranchModel::new(bad).is_err());
    }

    #[test]
    fn quality_out_of_range_is_rejected() {
        let m = micro(QualityMode::Scalar);
        assert!(m.forward(&window(6, [true; WINDOW_LEN]), 1.5).is_err());
    }
}
