//! Minimal differentiable building blocks for the branch models.

pub mod checkpoint;
pub mod layers;
pub mod params;
pub mod tape;
pub mod train;

pub use checkpoint::{read_checkpoint, save_checkpoint, Checkpoint};
pub use layers::{sinusoidal_positions, Linear, SelfAttentionLayer};
pub use params::{Grads, Param, ParamId, ParamStore, TensorRecord};
pub use tape::{sigmoid, Mat, Tape, Var};
pub use train::{fit, Sgd, TrainConfig};
