use std::collections::HashMap;

use mnpair_core::reduce::{
    conditional_affinities, dbscan, joint_affinities, tsne_reduce, DbscanConfig, PointRole, TsneConfig,
};
use proptest::prelude::*;

fn points_strategy() -> impl Strategy<Value = Vec<[f64; 2]>> {
    prop::collection::vec((0.0f64..20.0, 0.0f64..20.0).prop_map(|(x, y)| [x, y]), 1..120)
}

fn dist(a: &[f64; 2], b: &[f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[test]
fn tight_group_is_one_cluster_of_cores() {
    let pts: Vec<[f64; 2]> = (0..20).map(|i| [(i % 5) as f64 * 0.3, (i / 5) as f64 * 0.3]).collect();
    let a = dbscan(&pts, &DbscanConfig::new(3.0, 10).unwrap());
    assert_eq!(a.n_clusters, 1);
    assert!(a.labels.iter().all(|l| *l == Some(0)));
    assert!(a.roles.iter().all(|r| *r == PointRole::Core));
}

#[test]
fn isolated_point_is_noise() {
    let pts = [[0.0, 0.0], [0.5, 0.0], [100.0, 100.0]];
    let a = dbscan(&pts, &DbscanConfig::new(1.0, 2).unwrap());
    assert_eq!(a.labels, vec![Some(0), Some(0), None]);
    assert_eq!(a.roles[2], PointRole::Noise);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn roles_labels_and_ids_are_consistent(pts in points_strategy(), eps in 0.5f64..4.0, min_pts in 1usize..8) {
        let a = dbscan(&pts, &DbscanConfig::new(eps, min_pts).unwrap());
        let mut next = 0;
        for (i, (label, role)) in a.labels.iter().zip(&a.roles).enumerate() {
            prop_assert_eq!(*role == PointRole::Noise, label.is_none());
            let cores_near = (0..pts.len())
                .filter(|&j| a.roles[j] == PointRole::Core && dist(&pts[i], &pts[j]) <= eps)
                .collect::<Vec<_>>();
            match role {
                PointRole::Core => prop_assert!(a.neighbor_counts[i] >= min_pts),
                PointRole::Border => prop_assert!(cores_near.iter().any(|&j| a.labels[j] == *label)),
                PointRole::Noise => prop_assert!(cores_near.is_empty()),
            }
            if let Some(l) = label {
                prop_assert!(*l <= next, "ids not in first-appearance order");
                if *l == next {
                    next += 1;
                }
            }
        }
        prop_assert_eq!(next, a.n_clusters);
    }

    #[test]
    fn permutation_preserves_cores_noise_and_core_partition(
        pts in points_strategy(),
        eps in 0.5f64..4.0,
        min_pts in 1usize..8,
        shift in 0usize..1000,
    ) {
        let n = pts.len();
        let perm: Vec<usize> = (0..n).map(|i| (i * 7 + shift) % n).collect();
        prop_assume!({
            let mut s = perm.clone();
            s.sort_unstable();
            s.dedup();
            s.len() == n
        });
        let shuffled: Vec<[f64; 2]> = perm.iter().map(|&p| pts[p]).collect();
        let cfg = DbscanConfig::new(eps, min_pts).unwrap();
        let a = dbscan(&pts, &cfg);
        let b = dbscan(&shuffled, &cfg);
        prop_assert_eq!(a.n_clusters, b.n_clusters);
        let mut map = HashMap::new();
        for (k, &p) in perm.iter().enumerate() {
            prop_assert_eq!(a.roles[p], b.roles[k]);
            if a.roles[p] == PointRole::Core {
                let (x, y) = (a.labels[p].unwrap(), b.labels[k].unwrap());
                prop_assert_eq!(*map.entry(x).or_insert(y), y);
            }
        }
    }

    #[test]
    fn larger_eps_never_adds_noise(pts in points_strategy(), eps in 0.5f64..3.0, min_pts in 1usize..8) {
        let small = dbscan(&pts, &DbscanConfig::new(eps, min_pts).unwrap());
        let large = dbscan(&pts, &DbscanConfig::new(eps * 1.5, min_pts).unwrap());
        prop_assert!(large.noise_count() <= small.noise_count());
    }
}

#[test]
fn tsne_affinities_are_distributions() {
    let data: Vec<Vec<f64>> = (0..40)
        .map(|i| (0..16).map(|d| ((i * 31 + d * 17) % 23) as f64 / 7.0).collect())
        .collect();
    let cond = conditional_affinities(&data, 8.0);
    for row in cond.chunks(40) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let joint = joint_affinities(&cond, 40);
    assert!((joint.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    for i in 0..40 {
        for j in 0..40 {
            assert!((joint[i * 40 + j] - joint[j * 40 + i]).abs() < 1e-15);
        }
    }
    let cfg = TsneConfig { perplexity: 8.0, iterations: 400, ..Default::default() };
    let out = tsne_reduce(&data, &cfg).unwrap();
    assert_eq!(out.points.len(), 40);
    assert!(out.kl_trace.iter().all(|r| (r.q_sum - 1.0).abs() < 1e-9 && r.kl >= 0.0));
    assert!(tsne_reduce(&data, &TsneConfig { perplexity: 13.0, ..cfg }).is_err());
}
