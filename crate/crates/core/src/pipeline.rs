//! Config-driven orchestration of the full pipeline. Every stage reads its
//! inputs from and writes its outputs under one work directory, and leaves
//! a manifest (input and output hashes, effective config, seed, version)
//! in `manifests/<stage>.json`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::audio_branch::{AudioBranchConfig, AudioBranchModel, AudioTrainConfig};
use crate::audiofeat::AugmentConfig;
use crate::av_joint::{AvJointConfig, AvJointModel};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, SegmentLabels};
use crate::fusion::{fuse_tracks, smooth_track, write_fused_file, FusedTrack, FusionOrder};
use crate::nn::TrainConfig;
use crate::quality::{quality_track, ConfidenceProvider, ConstantProvider, QualityTrack, SidecarProvider, N_LANDMARKS};
use crate::synth::{self, SynthConfig, LANDMARKS_FILE, MANIFEST_FILE};
use crate::types::{load_manifest, read_track_file, write_track_file, ScoreTrack, Segment};
use crate::vision_branch::{QualityMode, VisionBranchConfig, VisionBranchModel, VisionTrainConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const WORKDIR_ENV: &str = "QUAVF_WORKDIR";
const LOCK_FILE: &str = ".quavf.lock";

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Synthetic dataset location; empty means `<work_dir>/data`.
    pub data_dir: String,
    pub work_dir: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: String::new(),
            work_dir: "work".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    /// Landmark confidences from the dataset's sidecar file.
    #[default]
    Sidecar,
    /// The same confidence for every detected face.
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QualityFeature {
    #[default]
    None,
    Scalar,
    Quantized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QualityConfig {
    pub provider: ProviderKind,
    pub constant_value: f64,
    /// Vision training keeps windows with sample quality strictly above tau.
    pub tau: f64,
    /// How quality enters the vision head.
    pub feature: QualityFeature,
    pub n_bins: usize,
}

impl Default for QualityConfig {
    fn default() -> Self {
        Self {
            provider: ProviderKind::Sidecar,
            constant_value: 1.0,
            tau: 0.3,
            feature: QualityFeature::None,
            n_bins: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AudioSection {
    pub d_model: usize,
    pub heads: usize,
    pub train: AudioTrainConfig,
}

impl Default for AudioSection {
    fn default() -> Self {
        let model = AudioBranchConfig::default();
        Self {
            d_model: model.d_model,
            heads: model.heads,
            train: AudioTrainConfig {
                optim: TrainConfig {
                    epochs: 30,
                    batch_size: 4,
                    ..TrainConfig::default()
                },
                augment: AugmentConfig {
                    crop_p: 0.0,
                    ..AugmentConfig::default()
                },
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisionSection {
    pub d_model: usize,
    pub heads: usize,
    pub feature_dim: usize,
    pub image_size: usize,
    pub conv_channels: (usize, usize),
    pub quality_dim: usize,
    pub fine_tune: bool,
    pub target_stride: usize,
    pub optim: TrainConfig,
}

impl Default for VisionSection {
    fn default() -> Self {
        let model = VisionBranchConfig::default();
        Self {
            d_model: 32,
            heads: 2,
            feature_dim: 32,
            image_size: model.image_size,
            conv_channels: model.conv_channels,
            quality_dim: model.quality_dim,
            fine_tune: false,
            target_stride: 6,
            optim: TrainConfig {
                epochs: 32,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AvJointSection {
    pub d_model: usize,
    pub heads: usize,
    pub feature_dim: usize,
    pub mlp_hidden: usize,
    pub image_size: usize,
    pub conv_channels: (usize, usize),
    pub fine_tune: bool,
    /// Train on the same quality-filtered windows as the vision branch.
    pub quality_filter: bool,
    pub target_stride: usize,
    pub optim: TrainConfig,
}

impl Default for AvJointSection {
    fn default() -> Self {
        let model = AvJointConfig::default();
        Self {
            d_model: 32,
            heads: 2,
            feature_dim: 32,
            mlp_hidden: 32,
            image_size: model.image_size,
            conv_channels: model.conv_channels,
            fine_tune: false,
            quality_filter: true,
            target_stride: 6,
            optim: TrainConfig {
                epochs: 8,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub order: FusionOrder,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            order: FusionOrder::FuseThenSmooth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: f64,
    pub window: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            window: 25,
        }
    }
}

/// The whole pipeline configuration. `seed` is the single source of
/// randomness: it replaces the seeds of the generator, every model's
/// initialization and every training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub synth: SynthConfig,
    pub quality: QualityConfig,
    pub audio: AudioSection,
    pub vision: VisionSection,
    pub av_joint: AvJointSection,
    pub fusion: FusionConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            paths: PathsConfig::default(),
            synth: SynthConfig::default(),
            quality: QualityConfig::default(),
            audio: AudioSection::default(),
            vision: VisionSection::default(),
            av_joint: AvJointSection::default(),
            fusion: FusionConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key.path=value` overrides. Values parse as JSON when they
    /// can and are taken as strings otherwise; unknown keys are rejected.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut doc = serde_json::to_value(self).expect("config serializes");
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut node = &mut doc;
            for part in key.split('.') {
                node = node
                    .get_mut(part)
                    .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
            }
            *node = value;
        }
        serde_json::from_value(doc).map_err(|e| Error::Config(format!("invalid override: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        if !(0.0..=1.0).contains(&self.quality.tau) {
            return Err(Error::Config(format!("quality.tau = {} outside [0, 1]", self.quality.tau)));
        }
        if self.quality.n_bins == 0 {
            return Err(Error::Config("quality.n_bins must be at least 1".into()));
        }
        if self.eval.window == 0 || self.eval.window.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "eval.window must be odd and >= 1, got {}",
                self.eval.window
            )));
        }
        Ok(())
    }

    fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    fn optim(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..base.clone()
        }
    }

    pub fn audio_model(&self) -> AudioBranchConfig {
        AudioBranchConfig {
            d_model: self.audio.d_model,
            heads: self.audio.heads,
            seed: self.seed,
        }
    }

    pub fn audio_train(&self) -> AudioTrainConfig {
        AudioTrainConfig {
            optim: self.optim(&self.audio.train.optim),
            augment: self.audio.train.augment.clone(),
        }
    }

    pub fn quality_mode(&self) -> QualityMode {
        match self.quality.feature {
            QualityFeature::None => QualityMode::None,
            QualityFeature::Scalar => QualityMode::Scalar,
            QualityFeature::Quantized => QualityMode::Quantized {
                n_bins: self.quality.n_bins,
            },
        }
    }

    pub fn vision_model(&self) -> VisionBranchConfig {
        let v = &self.vision;
        VisionBranchConfig {
            d_model: v.d_model,
            heads: v.heads,
            image_size: v.image_size,
            conv_channels: v.conv_channels,
            feature_dim: v.feature_dim,
            quality_mode: self.quality_mode(),
            quality_dim: v.quality_dim,
            seed: self.seed,
        }
    }

    pub fn vision_train(&self) -> VisionTrainConfig {
        VisionTrainConfig {
            optim: self.optim(&self.vision.optim),
            fine_tune: self.vision.fine_tune,
            tau: self.quality.tau,
            target_stride: self.vision.target_stride,
        }
    }

    pub fn av_joint_model(&self) -> AvJointConfig {
        let a = &self.av_joint;
        AvJointConfig {
            d_model: a.d_model,
            heads: a.heads,
            feature_dim: a.feature_dim,
            mlp_hidden: a.mlp_hidden,
            image_size: a.image_size,
            conv_channels: a.conv_channels,
            seed: self.seed,
        }
    }

    /// The baseline trains on every window: no quality filtering.
    pub fn av_joint_train(&self) -> VisionTrainConfig {
        VisionTrainConfig {
            optim: self.optim(&self.av_joint.optim),
            fine_tune: self.av_joint.fine_tune,
            tau: if self.av_joint.quality_filter { self.quality.tau } else { 0.0 },
            target_stride: self.av_joint.target_stride,
        }
    }
}

// ---------------------------------------------------------------------------
// Commands

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Audio,
    Vision,
    AvJoint,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Audio, ModelKind::Vision, ModelKind::AvJoint];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Audio => "audio",
            ModelKind::Vision => "vision",
            ModelKind::AvJoint => "av_joint",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            ModelKind::Audio => "Audio-only",
            ModelKind::Vision => "Vision-only",
            ModelKind::AvJoint => "AV-joint",
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "audio" => Ok(ModelKind::Audio),
            "vision" => Ok(ModelKind::Vision),
            "avjoint" | "av_joint" | "av-joint" => Ok(ModelKind::AvJoint),
            _ => Err(Error::Config(format!("unknown model `{s}`"))),
        }
    }
}

/// Scored systems: the three models plus quality-aware fusion.
pub const QUAVF: &str = "quavf";
pub const SYSTEMS: [(&str, &str); 4] = [
    ("audio", "Audio-only"),
    ("vision", "Vision-only"),
    ("av_joint", "AV-joint"),
    (QUAVF, "QuAVF"),
];

/// Raw and smoothed evaluation of one system on the validation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemEval {
    pub system: String,
    pub raw: EvalReport,
    pub smoothed: EvalReport,
}

/// Train/validation membership: a segment is held out when the first
/// eight bytes of the SHA-256 of its id are 0 modulo 5.
pub fn is_validation(segment_id: &str) -> bool {
    let digest = Sha256::digest(segment_id.as_bytes());
    let head = u64::from_be_bytes(digest[..8].try_into().expect("eight bytes"));
    head % 5 == 0
}

pub fn split<T>(items: Vec<T>, id: impl Fn(&T) -> &str) -> (Vec<T>, Vec<T>) {
    items.into_iter().partition(|x| !is_validation(id(x)))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub version: String,
    pub seed: u64,
    pub config: PipelineConfig,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// Exclusive use of a work directory for the lifetime of the guard.
pub struct WorkDirLock {
    path: PathBuf,
}

impl WorkDirLock {
    pub fn acquire(work_dir: &Path) -> Result<Self> {
        fs::create_dir_all(work_dir).map_err(|e| Error::io(work_dir, e))?;
        let path = work_dir.join(LOCK_FILE);
        fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    Error::Config(format!(
                        "work directory is locked by another run ({}); remove the file if no run is active",
                        path.display()
                    ))
                } else {
                    Error::io(&path, e)
                }
            })?;
        Ok(Self { path })
    }
}

impl Drop for WorkDirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// A configured pipeline bound to its directories.
pub struct Pipeline {
    pub config: PipelineConfig,
    pub work_dir: PathBuf,
    pub data_dir: PathBuf,
}

fn stage_err(stage: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Stage { .. } => e,
        other => Error::Stage {
            stage: stage.to_string(),
            message: other.to_string(),
        },
    }
}

impl Pipeline {
    /// Resolves directories; `QUAVF_WORKDIR` takes precedence over the
    /// configured work dir.
    pub fn new(config: PipelineConfig) -> Result<Self> {
        let work = std::env::var(WORKDIR_ENV).unwrap_or_else(|_| config.paths.work_dir.clone());
        Self::with_work_dir(config, PathBuf::from(work))
    }

    pub fn with_work_dir(config: PipelineConfig, work_dir: PathBuf) -> Result<Self> {
        config.validate()?;
        let data_dir = if config.paths.data_dir.is_empty() {
            work_dir.join("data")
        } else {
            PathBuf::from(&config.paths.data_dir)
        };
        Ok(Self {
            config,
            work_dir,
            data_dir,
        })
    }

    fn dir(&self, name: &str) -> Result<PathBuf> {
        let d = self.work_dir.join(name);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        Ok(d)
    }

    pub fn manifest_path(&self, stage: &str) -> PathBuf {
        self.work_dir.join("manifests").join(format!("{stage}.json"))
    }

    pub fn checkpoint_path(&self, model: ModelKind) -> PathBuf {
        self.work_dir.join("models").join(format!("{}.json", model.name()))
    }

    pub fn scores_path(&self, system: &str) -> PathBuf {
        self.work_dir.join("scores").join(format!("{system}.csv"))
    }

    pub fn quality_path(&self) -> PathBuf {
        self.work_dir.join("quality").join("quality.csv")
    }

    pub fn frame_quality_path(&self) -> PathBuf {
        self.work_dir.join("quality").join("frame_quality.csv")
    }

    pub fn eval_path(&self, system: &str) -> PathBuf {
        self.work_dir.join("eval").join(format!("{system}.json"))
    }

    pub fn report_path(&self) -> PathBuf {
        self.work_dir.join("report.md")
    }

    fn require(&self, stage: &str, needed: &str) -> Result<()> {
        let path = self.manifest_path(needed);
        if !path.exists() {
            return Err(Error::Stage {
                stage: stage.into(),
                message: format!(
                    "missing manifest {} (run `quavf {}` first)",
                    path.display(),
                    needed.split('_').next().unwrap_or(needed)
                ),
            });
        }
        Ok(())
    }

    fn write_manifest(&self, stage: &str, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<()> {
        let hash_all = |paths: &[PathBuf]| -> Result<BTreeMap<String, String>> {
            paths
                .iter()
                .map(|p| {
                    let key = p
                        .strip_prefix(&self.work_dir)
                        .unwrap_or(p)
                        .to_string_lossy()
                        .replace('\\', "/");
                    Ok((key, sha256_file(p)?))
                })
                .collect()
        };
        let manifest = StageManifest {
            stage: stage.into(),
            version: VERSION.into(),
            seed: self.config.seed,
            config: self.config.clone(),
            inputs: hash_all(inputs)?,
            outputs: hash_all(outputs)?,
        };
        let path = self.dir("manifests")?.join(format!("{stage}.json"));
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    fn segments(&self) -> Result<Vec<Segment>> {
        load_manifest(&self.data_dir.join(MANIFEST_FILE))
    }

    fn qualities(&self) -> Result<Vec<QualityTrack>> {
        let frame = read_track_file(&self.frame_quality_path(), "quality")?;
        let window = read_track_file(&self.quality_path(), "quality")?;
        Ok(frame
            .into_iter()
            .zip(window)
            .map(|(f, w)| QualityTrack {
                segment_id: w.segment_id,
                frame_quality: f.scores,
                window_quality: w.scores,
            })
            .collect())
    }

    // -- stages -------------------------------------------------------------

    pub fn synth(&self) -> Result<()> {
        let run = || -> Result<()> {
            let manifest = synth::generate(&self.config.synth_config(), &self.data_dir)?;
            let outputs = vec![
                manifest,
                self.data_dir.join(LANDMARKS_FILE),
                self.data_dir.join(synth::META_FILE),
            ];
            self.write_manifest("synth", &[], &outputs)
        };
        run().map_err(stage_err("synth"))
    }

    pub fn quality(&self) -> Result<()> {
        self.require("quality", "synth")?;
        let run = || -> Result<()> {
            let segments = self.segments()?;
            let provider: Box<dyn ConfidenceProvider> = match self.config.quality.provider {
                ProviderKind::Sidecar => Box::new(SidecarProvider::load(&self.data_dir.join(LANDMARKS_FILE))?),
                ProviderKind::Constant => Box::new(ConstantProvider {
                    value: self.config.quality.constant_value,
                    n_points: N_LANDMARKS,
                }),
            };
            let tracks = segments
                .iter()
                .map(|s| quality_track(s, provider.as_ref()))
                .collect::<Result<Vec<_>>>()?;
            self.dir("quality")?;
            let windows: Vec<ScoreTrack> = tracks.iter().map(QualityTrack::window_track).collect();
            let frames: Vec<ScoreTrack> = tracks.iter().map(QualityTrack::frame_track).collect();
            write_track_file(&self.quality_path(), &windows, "quality")?;
            write_track_file(&self.frame_quality_path(), &frames, "quality")?;
            self.write_manifest(
                "quality",
                &[self.data_dir.join(MANIFEST_FILE)],
                &[self.quality_path(), self.frame_quality_path()],
            )
        };
        run().map_err(stage_err("quality"))
    }

    pub fn train(&self, model: ModelKind) -> Result<Vec<f64>> {
        let stage = format!("train_{}", model.name());
        self.require(&stage, "synth")?;
        if model != ModelKind::Audio {
            self.require(&stage, "quality")?;
        }
        let run = || -> Result<Vec<f64>> {
            let (train, _) = split(self.segments()?, |s| &s.id);
            let ckpt = self.checkpoint_path(model);
            self.dir("models")?;
            let mut inputs = vec![self.data_dir.join(MANIFEST_FILE)];
            let curve = match model {
                ModelKind::Audio => {
                    let mut m = AudioBranchModel::new(self.config.audio_model());
                    let curve = m.train(&train, &self.config.audio_train())?;
                    m.save(&ckpt)?;
                    curve
                }
                ModelKind::Vision | ModelKind::AvJoint => {
                    inputs.push(self.quality_path());
                    let (qual, _) = split(self.qualities()?, |q| &q.segment_id);
                    if model == ModelKind::Vision {
                        let mut m = VisionBranchModel::new(self.config.vision_model())?;
                        let curve = m.train(&train, &qual, &self.config.vision_train())?;
                        m.save(&ckpt)?;
                        curve
                    } else {
                        let mut m = AvJointModel::new(self.config.av_joint_model())?;
                        let curve = m.train(&train, &qual, &self.config.av_joint_train())?;
                        m.save(&ckpt)?;
                        curve
                    }
                }
            };
            let curve_path = self.work_dir.join("models").join(format!("{}_loss.json", model.name()));
            let json = serde_json::to_string_pretty(&curve).expect("curve serializes");
            fs::write(&curve_path, json).map_err(|e| Error::io(&curve_path, e))?;
            self.write_manifest(&stage, &inputs, &[ckpt, curve_path])?;
            Ok(curve)
        };
        run().map_err(stage_err(&stage))
    }

    pub fn predict(&self, model: ModelKind) -> Result<()> {
        let stage = format!("predict_{}", model.name());
        self.require(&stage, &format!("train_{}", model.name()))?;
        let run = || -> Result<()> {
            let (_, segments) = split(self.segments()?, |s| &s.id);
            let ckpt = self.checkpoint_path(model);
            let mut inputs = vec![self.data_dir.join(MANIFEST_FILE), ckpt.clone()];
            let tracks = match model {
                ModelKind::Audio => {
                    let m = AudioBranchModel::load(&ckpt)?;
                    segments.iter().map(|s| m.predict(s)).collect::<Result<Vec<_>>>()?
                }
                ModelKind::Vision => {
                    inputs.push(self.quality_path());
                    let m = VisionBranchModel::load(&ckpt)?;
                    let qual: Vec<QualityTrack> = self
                        .qualities()?
                        .into_iter()
                        .filter(|q| is_validation(&q.segment_id))
                        .collect();
                    segments
                        .iter()
                        .zip(&qual)
                        .map(|(s, q)| m.predict(s, q))
                        .collect::<Result<Vec<_>>>()?
                }
                ModelKind::AvJoint => {
                    let m = AvJointModel::load(&ckpt)?;
                    segments.iter().map(|s| m.predict(s)).collect::<Result<Vec<_>>>()?
                }
            };
            self.dir("scores")?;
            let out = self.scores_path(model.name());
            write_track_file(&out, &tracks, "score")?;
            self.write_manifest(&stage, &inputs, &[out])
        };
        run().map_err(stage_err(&stage))
    }

    fn fuse_all(
        &self,
        vision: &[ScoreTrack],
        audio: &[ScoreTrack],
        quality: &[ScoreTrack],
        window: Option<usize>,
    ) -> Result<Vec<FusedTrack>> {
        if vision.len() != audio.len() || vision.len() != quality.len() {
            return Err(Error::Alignment(format!(
                "{} vision, {} audio and {} quality tracks",
                vision.len(),
                audio.len(),
                quality.len()
            )));
        }
        vision
            .iter()
            .zip(audio)
            .zip(quality)
            .map(|((v, a), q)| match window {
                None => fuse_tracks(v, a, q),
                Some(w) => fuse_tracks(&smooth_track(v, w)?, &smooth_track(a, w)?, q),
            })
            .collect()
    }

    fn smoothed_first_path(&self) -> PathBuf {
        self.work_dir.join("scores").join(format!("{QUAVF}_smoothed_branches.csv"))
    }

    pub fn fuse(&self) -> Result<()> {
        self.require("fuse", "predict_audio")?;
        self.require("fuse", "predict_vision")?;
        self.require("fuse", "quality")?;
        let run = || -> Result<()> {
            let audio = read_track_file(&self.scores_path("audio"), "score")?;
            let vision = read_track_file(&self.scores_path("vision"), "score")?;
            let quality: BTreeMap<String, ScoreTrack> = read_track_file(&self.quality_path(), "quality")?
                .into_iter()
                .map(|q| (q.segment_id.clone(), q))
                .collect();
            let quality = vision
                .iter()
                .map(|v| {
                    quality.get(&v.segment_id).cloned().ok_or_else(|| {
                        Error::Alignment(format!("no quality track for segment {}", v.segment_id))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let fused = self.fuse_all(&vision, &audio, &quality, None)?;
            let out = self.scores_path(QUAVF);
            write_fused_file(&out, &fused)?;
            let mut outputs = vec![out];
            if self.config.fusion.order == FusionOrder::SmoothThenFuse {
                let fused = self.fuse_all(&vision, &audio, &quality, Some(self.config.eval.window))?;
                write_fused_file(&self.smoothed_first_path(), &fused)?;
                outputs.push(self.smoothed_first_path());
            }
            let inputs = vec![self.scores_path("audio"), self.scores_path("vision"), self.quality_path()];
            self.write_manifest("fuse", &inputs, &outputs)
        };
        run().map_err(stage_err("fuse"))
    }

    /// Evaluates every system whose scores exist, on the validation split.
    pub fn eval(&self) -> Result<Vec<SystemEval>> {
        self.require("eval", "synth")?;
        let run = || -> Result<Vec<SystemEval>> {
            let segments = self.segments()?;
            let (_, val) = split(segments, |s| &s.id);
            let labels: Vec<SegmentLabels> = val
                .iter()
                .map(|s| SegmentLabels {
                    id: s.id.clone(),
                    labels: s.labels(),
                })
                .collect();
            let (threshold, window) = (self.config.eval.threshold, self.config.eval.window);
            let mut results = Vec::new();
            let mut inputs = Vec::new();
            self.dir("eval")?;
            for (system, _) in SYSTEMS {
                let path = self.scores_path(system);
                if !path.exists() {
                    continue;
                }
                let tracks = read_track_file(&path, "score")?;
                let raw = evaluate(&tracks, &labels, threshold, 1)?;
                let smoothed = if system == QUAVF && self.config.fusion.order == FusionOrder::SmoothThenFuse {
                    let pre = read_track_file(&self.smoothed_first_path(), "score")?;
                    EvalReport {
                        window,
                        ..evaluate(&pre, &labels, threshold, 1)?
                    }
                } else {
                    evaluate(&tracks, &labels, threshold, window)?
                };
                let result = SystemEval {
                    system: system.into(),
                    raw,
                    smoothed,
                };
                let out = self.eval_path(system);
                let json = serde_json::to_string_pretty(&result).expect("eval serializes");
                fs::write(&out, json).map_err(|e| Error::io(&out, e))?;
                inputs.push(path);
                results.push(result);
            }
            if results.is_empty() {
                return Err(Error::Config("no score files to evaluate".into()));
            }
            let outputs: Vec<PathBuf> = results.iter().map(|r| self.eval_path(&r.system)).collect();
            self.write_manifest("eval", &inputs, &outputs)?;
            Ok(results)
        };
        run().map_err(stage_err("eval"))
    }

    pub fn load_evals(&self) -> Result<Vec<SystemEval>> {
        let mut out = Vec::new();
        for (system, _) in SYSTEMS {
            let path = self.eval_path(system);
            if path.exists() {
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                out.push(serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))?);
            }
        }
        Ok(out)
    }

    /// Comparison table of every evaluated system.
    pub fn report(&self) -> Result<String> {
        let run = || -> Result<String> {
            let evals = self.load_evals()?;
            if evals.is_empty() {
                return Err(Error::Config(format!(
                    "nothing evaluated yet under {}",
                    self.work_dir.join("eval").display()
                )));
            }
            let table = render_report(&evals);
            let path = self.report_path();
            fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
            Ok(table)
        };
        run().map_err(stage_err("report"))
    }

    /// Every stage in order; returns the report table.
    pub fn all(&self) -> Result<String> {
        self.synth()?;
        self.quality()?;
        for m in ModelKind::ALL {
            self.train(m)?;
            self.predict(m)?;
        }
        self.fuse()?;
        self.eval()?;
        self.report()
    }
}

/// Markdown table, metrics in percent with one decimal.
pub fn render_report(evals: &[SystemEval]) -> String {
    let mut out = String::from(
        "| Model | Acc | mAP | Acc (smoothed) | mAP (smoothed) |\n|---|---:|---:|---:|---:|\n",
    );
    for e in evals {
        let title = SYSTEMS
            .iter()
            .find(|(s, _)| *s == e.system)
            .map_or(e.system.as_str(), |(_, t)| t);
        let _ = writeln!(
            out,
            "| {title} | {:.1} | {:.1} | {:.1} | {:.1} |",
            100.0 * e.raw.accuracy,
            100.0 * e.raw.map,
            100.0 * e.smoothed.accuracy,
            100.0 * e.smoothed.map
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_follow_dotted_paths() {
        let cfg = PipelineConfig::default()
            .with_overrides(&["eval.window=5".into(), "quality.feature=scalar".into(), "seed=11".into()])
            .unwrap();
        assert_eq!(cfg.eval.window, 5);
        assert_eq!(cfg.quality.feature, QualityFeature::Scalar);
        assert_eq!(cfg.seed, 11);
        assert!(PipelineConfig::default().with_overrides(&["eval.nope=1".into()]).is_err());
        assert!(PipelineConfig::default().with_overrides(&["eval.window".into()]).is_err());
        assert!(PipelineConfig::default().with_overrides(&["eval.window=\"x\"".into()]).is_err());
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let cfg = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert_eq!(PipelineConfig::from_json("{}").unwrap(), cfg);
        assert!(PipelineConfig::from_json(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn even_window_fails_validation() {
        let cfg = PipelineConfig::default().with_overrides(&["eval.window=24".into()]).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn split_is_roughly_one_in_five() {
        let ids: Vec<String> = (0..1000).map(synth::segment_id).collect();
        let val = ids.iter().filter(|i| is_validation(i)).count();
        assert!((150..250).contains(&val), "{val}");
        assert_eq!(is_validation("seg0001"), is_validation("seg0001"));
    }

    #[test]
    fn report_formats_percent_with_one_decimal() {
        let r = EvalReport {
            accuracy: 0.70149,
            map: 0.5,
            n_frames: 10,
            threshold: 0.5,
            window: 1,
        };
        let e = SystemEval {
            system: "audio".into(),
            raw: r.clone(),
            smoothed: r,
        };
        let table = render_report(&[e]);
        assert!(table.contains("| Audio-only | 70.1 | 50.0 | 70.1 | 50.0 |"));
        assert_eq!(table.lines().count(), 3);
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let lock = WorkDirLock::acquire(dir.path()).unwrap();
        assert!(WorkDirLock::acquire(dir.path()).is_err());
        drop(lock);
        assert!(WorkDirLock::acquire(dir.path()).is_ok());
    }
}
