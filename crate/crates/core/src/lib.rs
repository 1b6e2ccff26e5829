//! MN-pair contrastive damage embeddings.
//!
//! A small convolutional network maps each image to a 16-dimensional
//! embedding. Training pulls an anchor towards several same-class positives
//! and away from other-class negatives with a weighted, temperature-scaled
//! softmax loss. The learned embeddings are reduced to 2-D with exact t-SNE,
//! clustered with DBSCAN, and individual embeddings are explained with a
//! Grad-CAM map driven by the squared norm of the penultimate layer.

pub mod contrastive;
pub mod error;
pub mod explain;
pub mod imageops;
pub mod io;
pub mod nn;
pub mod reduce;
pub mod report;
pub mod tensor;
pub mod trainer;

pub use contrastive::{EmbeddingRecord, LossConfig, MnPairSet};
pub use error::{Error, Result};
pub use nn::{Checkpoint, Network, NetworkSpec};
pub use tensor::{Scalar, Tensor};
