//! Retrieval, report figures and the staged command-line pipeline.

mod figures;
mod pipeline;
mod retrieval;

pub use figures::{
    cluster_exemplar, cluster_tiles, heatmap_grid, render_grid, scatter_plot, thumbnail, tile_layout, TileRow,
    TILE_COLUMNS,
};
pub use pipeline::{
    explain_files, file_sha256, run_pipeline, run_stage, sha256_hex, Evaluation, FailedStage, Manifest,
    PipelineConfig, Seeds, Stage, StageRecord, StageStatus, CLUSTERS_FILE, EMBEDDINGS_FILE, EVALUATION_FILE,
    KL_FILE, MANIFEST_FILE, MANIFEST_VERSION, PIPELINE_KEYS, POINTS_FILE, SUMMARY_FILE,
};
pub use retrieval::{nearest_neighbors, one_nn_accuracy, Neighbor, RetrievalResult};
