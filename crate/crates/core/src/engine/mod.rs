//! Configuration, training, checkpoints and inference.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod model;
pub mod plot;
pub mod train;

pub use augment::{augment, Sample};
pub use checkpoint::{Checkpoint, NamedTensor, CHECKPOINT_VERSION};
pub use config::{default_queue_size, lr_at, lr_at_epoch, InferenceConfig, ModelConfig, ResizePolicy, TrainConfig, CONFIG_VERSION};
pub use model::PersonSearchNet;
pub use plot::{plot_losses, plot_sweep};
pub use train::{checkpoint_path, net_from_checkpoint, StepLog, Trainer};

use image::RgbImage;

use crate::context::PersonEmbedding;
use crate::error::Result;

/// Detections with embeddings for one image from a saved checkpoint.
pub fn infer(image: &RgbImage, checkpoint: &Checkpoint) -> Result<Vec<PersonEmbedding>> {
    net_from_checkpoint(checkpoint)?.detect(image)
}
