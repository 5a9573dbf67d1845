//! Trainable scoring network: fixed image statistics, a small ReLU MLP
//! standing in for the pretrained backbone, and an N-way head whose softmax
//! is the predicted score distribution.

pub mod augment;
pub mod checkpoint;
pub mod features;
mod net;
pub mod train;

pub use augment::{AugmentDraw, Augmentation};
pub use checkpoint::Checkpoint;
pub use features::{image_statistics, STATS_DIM};
pub use net::{
    backward, backward_with, extract_features, forward, forward_stats, predict, Activation, Dense,
    ForwardCache, Gradients, InputGeometry, InputNorm, LayerGrad, LossKind, ModelParams, TrainMode,
};
pub use train::{
    batch_gradient, momentum_step, train, train_on_images, MomentumState, TrainConfig,
};
