//! Density-based clustering of 2-D points.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DbscanConfig {
    eps: f64,
    min_pts: usize,
}

impl DbscanConfig {
    pub fn new(eps: f64, min_pts: usize) -> Result<Self> {
        if !(eps.is_finite() && eps > 0.0) {
            return Err(Error::config(format!("eps must be positive, got {eps}")));
        }
        if min_pts == 0 {
            return Err(Error::config("min_pts must be at least 1"));
        }
        Ok(DbscanConfig { eps, min_pts })
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn min_pts(&self) -> usize {
        self.min_pts
    }
}

impl Default for DbscanConfig {
    fn default() -> Self {
        DbscanConfig { eps: 3.0, min_pts: 10 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointRole {
    Core,
    Border,
    Noise,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    /// Cluster id per point, numbered from 0 in order of first appearance; `None` is noise.
    pub labels: Vec<Option<usize>>,
    pub roles: Vec<PointRole>,
    /// Size of each point's eps-neighbourhood, the point itself included.
    pub neighbor_counts: Vec<usize>,
    pub n_clusters: usize,
}

impl ClusterAssignment {
    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == Some(cluster)).collect()
    }
}

/// Neighbour lists (ascending index, self included) found through a uniform
/// grid with cell side `eps`.
pub fn neighborhoods(points: &[[f64; 2]], eps: f64) -> Vec<Vec<usize>> {
    let cell = |p: &[f64; 2]| ((p[0] / eps).floor() as i64, (p[1] / eps).floor() as i64);
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(cell(p)).or_default().push(i);
    }
    let eps2 = eps * eps;
    points
        .iter()
        .map(|p| {
            let (cx, cy) = cell(p);
            let mut out = Vec::new();
            for dx in -1..=1 {
                for dy in -1..=1 {
                    if let Some(bucket) = grid.get(&(cx + dx, cy + dy)) {
                        for &j in bucket {
                            let q = &points[j];
                            let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
                            if d2 <= eps2 {
                                out.push(j);
                            }
                        }
                    }
                }
            }
            out.sort_unstable();
            out
        })
        .collect()
}

/// Clusters `points`; cores have at least `min_pts` points (themselves
/// included) within distance `eps`. A border point joins the cluster of its
/// lowest-index core neighbour.
pub fn dbscan(points: &[[f64; 2]], config: &DbscanConfig) -> ClusterAssignment {
    let n = points.len();
    let neighbors = neighborhoods(points, config.eps);
    let is_core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= config.min_pts).collect();

    let mut component: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..n {
        if !is_core[start] || component[start].is_some() {
            continue;
        }
        component[start] = Some(next);
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            for &j in &neighbors[i] {
                if is_core[j] && component[j].is_none() {
                    component[j] = Some(next);
                    queue.push_back(j);
                }
            }
        }
        next += 1;
    }

    let mut roles = vec![PointRole::Noise; n];
    for i in 0..n {
        if is_core[i] {
            roles[i] = PointRole::Core;
        } else if let Some(&c) = neighbors[i].iter().find(|&&j| is_core[j]) {
            component[i] = component[c];
            roles[i] = PointRole::Border;
        }
    }

    let mut remap: HashMap<usize, usize> = HashMap::new();
    let labels: Vec<Option<usize>> = component
        .iter()
        .map(|c| {
            c.map(|c| {
                let len = remap.len();
                *remap.entry(c).or_insert(len)
            })
        })
        .collect();

    ClusterAssignment {
        labels,
        roles,
        neighbor_counts: neighbors.iter().map(Vec::len).collect(),
        n_clusters: remap.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(xs: &[f64]) -> Vec<[f64; 2]> {
        xs.iter().map(|&x| [x, 0.0]).collect()
    }

    #[test]
    fn two_groups_and_noise() {
        let pts = line(&[0.0, 0.5, 1.0, 10.0, 10.5, 11.0, 50.0]);
        let a = dbscan(&pts, &DbscanConfig::new(1.0, 2).unwrap());
        assert_eq!(a.n_clusters, 2);
        assert_eq!(a.labels, vec![Some(0), Some(0), Some(0), Some(1), Some(1), Some(1), None]);
        assert_eq!(a.roles[6], PointRole::Noise);
        assert_eq!(a.noise_count(), 1);
    }

    #[test]
    fn neighbourhood_is_inclusive_and_counts_self() {
        let pts = line(&[0.0, 1.0]);
        let a = dbscan(&pts, &DbscanConfig::new(1.0, 2).unwrap());
        assert_eq!(a.neighbor_counts, vec![2, 2]);
        assert_eq!(a.n_clusters, 1);
        let b = dbscan(&pts, &DbscanConfig::new(0.999, 2).unwrap());
        assert_eq!(b.n_clusters, 0);
    }

    #[test]
    fn border_joins_lowest_index_core() {
        // Point 4 at x=2.25 has three neighbours and touches a core on each side.
        let pts = line(&[0.0, 0.25, 0.5, 1.0, 2.25, 3.5, 3.75, 4.0, 4.5]);
        let a = dbscan(&pts, &DbscanConfig::new(1.25, 4).unwrap());
        assert_eq!(a.roles[3], PointRole::Core);
        assert_eq!(a.roles[4], PointRole::Border);
        assert_eq!(a.roles[5], PointRole::Core);
        assert_eq!(a.labels[4], a.labels[3]);
        assert_ne!(a.labels[3], a.labels[5]);
    }

    #[test]
    fn empty_input_and_invalid_config() {
        let a = dbscan(&[], &DbscanConfig::default());
        assert_eq!(a.n_clusters, 0);
        assert!(DbscanConfig::new(0.0, 3).is_err());
        assert!(DbscanConfig::new(1.0, 0).is_err());
    }
}
