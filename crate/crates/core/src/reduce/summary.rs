use serde::{Deserialize, Serialize};

use super::dbscan::ClusterAssignment;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummaryRow {
    /// Cluster id as written to the cluster JSON (from 1); `None` for the noise row.
    pub cluster: Option<usize>,
    pub size: usize,
    /// Member count per ground-truth class.
    pub composition: Vec<usize>,
    pub dominant_class: Option<usize>,
    pub purity: f64,
}

/// One row per cluster in id order, followed by a noise row when any point is noise.
pub fn cluster_summary(
    assignment: &ClusterAssignment,
    class_labels: &[usize],
    n_classes: usize,
) -> Vec<ClusterSummaryRow> {
    let mut rows: Vec<ClusterSummaryRow> = (0..=assignment.n_clusters)
        .map(|c| ClusterSummaryRow {
            cluster: (c < assignment.n_clusters).then_some(c + 1),
            size: 0,
            composition: vec![0; n_classes],
            dominant_class: None,
            purity: 0.0,
        })
        .collect();
    for (label, &class) in assignment.labels.iter().zip(class_labels) {
        let row = &mut rows[label.unwrap_or(assignment.n_clusters)];
        row.size += 1;
        row.composition[class] += 1;
    }
    for row in &mut rows {
        if row.size > 0 {
            let (best, &count) = row
                .composition
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .expect("n_classes > 0 when size > 0");
            row.dominant_class = Some(best);
            row.purity = count as f64 / row.size as f64;
        }
    }
    if rows.last().is_some_and(|r| r.size == 0) {
        rows.pop();
    }
    rows
}

/// Unweighted mean purity over real clusters; 0 when there are none.
pub fn mean_purity(rows: &[ClusterSummaryRow]) -> f64 {
    let purities: Vec<f64> = rows.iter().filter(|r| r.cluster.is_some()).map(|r| r.purity).collect();
    if purities.is_empty() {
        0.0
    } else {
        purities.iter().sum::<f64>() / purities.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reduce::PointRole;

    #[test]
    fn composition_and_purity() {
        let a = ClusterAssignment {
            labels: vec![Some(0), Some(0), Some(0), Some(1), None],
            roles: vec![PointRole::Core; 5],
            neighbor_counts: vec![1; 5],
            n_clusters: 2,
        };
        let rows = cluster_summary(&a, &[0, 0, 1, 1, 1], 2);
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[0].composition, vec![2, 1]);
        assert!((rows[0].purity - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rows[1].dominant_class, Some(1));
        assert_eq!(rows[0].cluster, Some(1));
        assert_eq!(rows[2].cluster, None);
        assert!((mean_purity(&rows) - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-12);
    }
}
