use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamStore};
use super::tape::Mat;
use crate::error::{Error, Result};

/// Optimizer and schedule settings shared by every model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Rescale the batch gradient to this global L2 norm when it is larger.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            epochs: 10,
            batch_size: 16,
            seed: 7,
            grad_clip: Some(5.0),
        }
    }
}

/// Heavy-ball SGD: `v <- momentum * v + g; p <- p - lr * v`.
#[derive(Debug, Default)]
pub struct Sgd {
    velocity: Vec<Option<Mat>>,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64, momentum: f64) {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for (id, g) in grads.iter() {
            let param = store.get_mut(id);
            if !param.trainable {
                continue;
            }
            let v = self.velocity[id.0].get_or_insert_with(|| Mat::zeros(g.raw_dim()));
            v.zip_mut_with(g, |v, &g| *v = momentum * *v + g);
            param.value.scaled_add(-lr, v);
        }
    }
}

/// Mini-batch training loop. `sample_loss` returns the loss of one sample
/// and its parameter gradients; it receives the shared rng for
/// augmentation draws. Returns the mean loss of each epoch.
pub fn fit<F>(
    store: &mut ParamStore,
    n_samples: usize,
    cfg: &TrainConfig,
    mut sample_loss: F,
) -> Result<Vec<f64>>
where
    F: FnMut(&ParamStore, usize, &mut ChaCha8Rng) -> Result<(f64, Grads)>,
{
    if n_samples == 0 {
        return Err(Error::Config("training set is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new();
    let mut order: Vec<usize> = (0..n_samples).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = Grads::zeros(store.len());
            let mut batch_loss = 0.0;
            for &i in chunk {
                let (loss, g) = sample_loss(store, i, &mut rng)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch, loss });
                }
                batch_loss += loss;
                grads.add_assign(&g);
            }
            grads.scale(1.0 / chunk.len() as f64);
            if let Some(max) = cfg.grad_clip {
                let norm = grads.norm();
                if !norm.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch,
                        loss: norm,
                    });
                }
                if norm > max {
                    grads.scale(max / norm);
                }
            }
            opt.step(store, &grads, cfg.lr, cfg.momentum);
            epoch_loss += batch_loss;
        }
        let mean = epoch_loss / n_samples as f64;
        log::info!("epoch {epoch}: mean loss {mean:.5}");
        curve.push(mean);
    }
    Ok(curve)
}
