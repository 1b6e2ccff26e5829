use mnpair_core::contrastive::{l2_normalize, mnpair_loss, npair_loss, LossConfig};
use proptest::prelude::*;

fn vectors(count: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, dim), count)
}

fn set_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    (2usize..12, 1usize..5, 1usize..5).prop_flat_map(|(dim, p, n)| {
        (prop::collection::vec(-3.0f64..3.0, dim), vectors(p, dim), vectors(n, dim))
    })
}

fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(Vec::as_slice).collect()
}

proptest! {
    #[test]
    fn loss_decreases_in_positive_weight(
        (a, p, n) in set_strategy(),
        tau in 0.05f64..1.0,
        v1 in 0.01f64..0.98,
        dv in 0.005f64..0.5,
    ) {
        let v2 = (v1 + dv).min(0.99);
        prop_assume!(v2 > v1);
        let l1 = mnpair_loss(&a, &refs(&p), &refs(&n), &LossConfig::new(tau, v1).unwrap()).unwrap();
        let l2 = mnpair_loss(&a, &refs(&p), &refs(&n), &LossConfig::new(tau, v2).unwrap()).unwrap();
        prop_assert!(l2 <= l1, "v {} -> {}: loss {} -> {}", v1, v2, l1, l2);
        // below ~1e-9 both losses can round to the same value
        if l1 > 1e-9 {
            prop_assert!(l2 < l1, "v {} -> {}: loss {} -> {}", v1, v2, l1, l2);
        }
    }

    #[test]
    fn small_temperature_stays_finite((a, p, n) in set_strategy(), v in 0.05f64..0.95) {
        let l = mnpair_loss(&a, &refs(&p), &refs(&n), &LossConfig::new(0.01, v).unwrap()).unwrap();
        prop_assert!(l.is_finite() && l >= 0.0);
        let np = npair_loss(&a, &p[0], &refs(&n), 0.01).unwrap();
        prop_assert!(np.is_finite());
    }

    #[test]
    fn normalized_vectors_have_unit_norm(e in prop::collection::vec(-1e3f64..1e3, 1..32)) {
        let (u, degenerate) = l2_normalize(&e);
        if !degenerate {
            let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn empty_sets_are_rejected() {
    let cfg = LossConfig::new(0.3, 0.15).unwrap();
    assert!(mnpair_loss(&[1.0, 0.0], &[], &[&[0.0, 1.0]], &cfg).is_err());
    assert!(mnpair_loss(&[1.0, 0.0], &[&[0.0, 1.0]], &[], &cfg).is_err());
    assert!(LossConfig::new(0.3, 1.0).is_err());
    assert!(LossConfig::new(0.0, 0.5).is_err());
}
