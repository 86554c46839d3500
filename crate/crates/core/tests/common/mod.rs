//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use quavf_core::audio_branch::{AudioBranchConfig, AudioBranchModel};
use quavf_core::av_joint::{AvJointConfig, AvJointModel};
use quavf_core::nn::{Grads, Mat, ParamStore};
use quavf_core::types::{AudioClip, FrameWindow, Image, SAMPLE_RATE, WINDOW_CENTER, WINDOW_LEN};
use quavf_core::vision_branch::{QualityMode, VisionBranchConfig, VisionBranchModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for the relative error of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel: f64,
    pub worst: String,
    /// Frozen parameters that nevertheless received a nonzero gradient.
    pub leaked: Vec<String>,
}

/// Compare analytic gradients of every trainable entry with central
/// finite differences of `loss`.
pub fn gradcheck<M>(
    model: &mut M,
    store: fn(&mut M) -> &mut ParamStore,
    loss: impl Fn(&M) -> f64,
    grads: &Grads,
) -> GradCheck {
    let params: Vec<_> = store(model)
        .iter()
        .map(|(id, p)| (id, p.name.clone(), p.value.len(), p.trainable))
        .collect();
    let mut report = GradCheck {
        checked: 0,
        max_rel: 0.0,
        worst: String::new(),
        leaked: Vec::new(),
    };
    for (id, name, len, trainable) in params {
        if !trainable {
            if grads.get(id).is_some_and(|g| g.iter().any(|&v| v != 0.0)) {
                report.leaked.push(name);
            }
            continue;
        }
        for k in 0..len {
            let orig = store(model).get(id).value.as_slice().expect("standard layout")[k];
            let at = |v: f64, model: &mut M| {
                store(model).get_mut(id).value.as_slice_mut().expect("standard layout")[k] = v;
                loss(model)
            };
            let plus = at(orig + FD_STEP, model);
            let minus = at(orig - FD_STEP, model);
            at(orig, model);
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let analytic = grads.entry(id, k);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if rel > report.max_rel {
                report.max_rel = rel;
                report.worst = format!("{name}[{k}] analytic {analytic:e} numeric {numeric:e}");
            }
        }
    }
    report
}

pub fn random_mat(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

pub fn random_crop(size: usize, rng: &mut impl Rng) -> Image {
    Image::from_fn(size, size, 3, |_, _, _| rng.random_range(0.0..1.0))
}

/// A 15-frame window of random crops; `masked` positions are padding.
pub fn random_window(size: usize, masked: &[usize], rng: &mut impl Rng) -> FrameWindow {
    let mut mask = [true; WINDOW_LEN];
    for &m in masked {
        mask[m] = false;
    }
    FrameWindow {
        target_index: WINDOW_CENTER,
        frame_indices: std::array::from_fn(|i| i),
        crops: (0..WINDOW_LEN).map(|_| random_crop(size, rng)).collect(),
        mask,
    }
}

pub fn random_clip(seconds: f64, rng: &mut impl Rng) -> AudioClip {
    let n = (seconds * f64::from(SAMPLE_RATE)) as usize;
    AudioClip::new((0..n).map(|_| rng.random_range(-0.3..0.3)).collect(), SAMPLE_RATE).expect("valid clip")
}

/// Gradient check of the audio branch at D=8, H=2, T=16.
pub fn audio_gradcheck(seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = AudioBranchModel::new(AudioBranchConfig {
        d_model: 8,
        heads: 2,
        seed,
    });
    let features = random_mat(16, 8, &mut rng);
    let labels: Vec<u8> = (0..10).map(|_| u8::from(rng.random_bool(0.5))).collect();
    let (_, grads) = model.loss_and_grads(&features, &labels).expect("loss");
    gradcheck(
        &mut model,
        AudioBranchModel::store_mut,
        |m| m.loss(&features, &labels).expect("loss"),
        &grads,
    )
}

/// Gradient check of the vision branch with a trainable encoder.
pub fn vision_gradcheck(seed: u64, quality_mode: QualityMode) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = VisionBranchModel::new(VisionBranchConfig {
        d_model: 8,
        heads: 2,
        image_size: 8,
        conv_channels: (2, 2),
        feature_dim: 4,
        quality_mode,
        quality_dim: 3,
        seed,
    })
    .expect("valid config");
    model.set_encoder_trainable(true);
    let window = random_window(8, &[0, 1, 12], &mut rng);
    let (q, label) = (0.63, 1);
    let (_, grads) = model.loss_and_grads(&window, q, label).expect("loss");
    gradcheck(
        &mut model,
        VisionBranchModel::store_mut,
        |m| m.loss(&window, q, label).expect("loss"),
        &grads,
    )
}

/// Gradient check of the AV-joint baseline with a trainable image encoder.
pub fn av_joint_gradcheck(seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = AvJointModel::new(AvJointConfig {
        d_model: 8,
        heads: 2,
        feature_dim: 4,
        mlp_hidden: 6,
        image_size: 8,
        conv_channels: (2, 2),
        seed,
    })
    .expect("valid config");
    model.set_image_encoder_trainable(true);
    let window = random_window(8, &[14], &mut rng);
    let tokens = model.audio_tokens(&random_clip(1.0, &mut rng)).expect("tokens");
    let label = 0;
    let (_, grads) = model.token_loss_and_grads(&tokens, &window, label).expect("loss");
    gradcheck(
        &mut model,
        AvJointModel::store_mut,
        |m| m.token_loss(&tokens, &window, label).expect("loss"),
        &grads,
    )
}
