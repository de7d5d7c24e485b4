//! Desk-scale VGG, ResNet and SE-ResNet speaker backbones with temporal
//! average pooling and optional frequency attention.

mod config;
mod model;
mod train;

pub use config::{BackboneConfig, Family, FefaMode};
pub use model::{se_block, stack_inputs, ForwardOutput, Inference, ModelDescription, SpeakerModel, MODEL_FILE};
pub use train::{accuracy, train_epoch, EpochStats, Example};
