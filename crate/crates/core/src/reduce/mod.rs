//! Two-dimensional reduction of embeddings and density clustering.

mod dbscan;
mod summary;
mod tsne;

pub use dbscan::{dbscan, neighborhoods, ClusterAssignment, DbscanConfig, PointRole};
pub use summary::{cluster_summary, mean_purity, ClusterSummaryRow};
pub use tsne::{
    conditional_affinities, joint_affinities, kl_divergence, output_affinities, tsne_reduce,
    KlRecord, TsneConfig, TsneResult,
};
