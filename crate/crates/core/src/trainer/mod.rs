//! Data ingestion, augmentation, the training loop and the synthetic
//! texture generator.

mod augment;
mod config;
mod dataset;
mod synth;
mod train;

pub use augment::{random_erasing, ErasingParams, Rect};
pub use config::{parse_kv, TrainConfig, TRAIN_KEYS};
pub use dataset::{load_dataset, DatasetEntry, DatasetIndex, Split, TRAIN_FRACTION};
pub use synth::{class_name as synthetic_class_name, generate_synthetic_dataset, render as render_synthetic, SynthSpec};
pub use train::{extract_embeddings, train, train_artifacts, TrainOutcome, CHECKPOINT_FILE, LOSS_FILE};
