//! Self-supervised multi-view reconstruction training.
//!
//! Predicted keypoints are projected into every supervised view and drawn
//! as an edge map; a small encoder-decoder reconstructs each view from the
//! (augmented) input image and that edge map. The edge map is the only path
//! by which the target view's pose reaches the decoder.

mod augment;
mod config;
mod losses;
mod model;
mod params;
mod train;

pub use augment::{affine_augment, apply_affine, AffineParams};
pub use config::{AugmentConfig, TrainConfig};
pub use losses::{mask_loss, perceptual_loss, total_loss, Extractor};
pub use model::{LossForward, Model, ModelShape, ViewTerms};
pub use params::{AdamW, Group, Param, ParamStore};
pub use train::{
    predict_keypoints, Checkpoint, SampleTerms, StepRecord, TableCache, Trainer, CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};
