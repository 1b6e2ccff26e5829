//! Tensor layers with reverse-mode gradients, the convolutional embedding
//! network, Adam and the checkpoint format.

mod adam;
mod checkpoint;
mod gradcheck;
pub mod layers;
mod network;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, MAGIC as CHECKPOINT_MAGIC, VERSION as CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, GradCheckSample};
pub use layers::{
    conv2d, conv2d_backward, fully_connected, fully_connected_backward, maxpool2,
    maxpool2_backward, relu, relu_backward, Pooled,
};
pub use network::{
    Gradients, LayerKind, LayerParams, LayerSpec, Network, NetworkSpec, ParamSet, Tape, EMBED_DIM,
    INPUT_CHANNELS, INPUT_SIZE,
};
