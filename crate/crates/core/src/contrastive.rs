//! Cosine similarity, temperature scaling and the N-pair / MN-pair losses.
//!
//! For an anchor `a` with positives `p_j` and negatives `n_k` (all
//! L2-normalized) and scaled similarities `s_j = a.p_j / tau`,
//! `t_k = a.n_k / tau`, the MN-pair loss is
//!
//! ```text
//! -log( v sum_j exp(s_j) / (v sum_j exp(s_j) + w sum_k exp(t_k)) ),  w = 1 - v
//! ```
//!
//! Losses are evaluated as differences of log-sum-exps so that small
//! temperatures cannot overflow.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Normalization guard: vectors shorter than this are divided by it instead.
pub const NORM_EPSILON: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    temperature: f64,
    positive_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.3,
            positive_weight: 0.15,
        }
    }
}

impl LossConfig {
    pub fn new(temperature: f64, positive_weight: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::config(format!("temperature must be > 0, got {temperature}")));
        }
        if !(positive_weight > 0.0 && positive_weight < 1.0) {
            return Err(Error::config(format!(
                "positive weight must lie in (0, 1), got {positive_weight}"
            )));
        }
        Ok(LossConfig {
            temperature,
            positive_weight,
        })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn positive_weight(&self) -> f64 {
        self.positive_weight
    }

    /// Always `1 - positive_weight`.
    pub fn negative_weight(&self) -> f64 {
        1.0 - self.positive_weight
    }
}

/// One anchor with its positives and negatives, as indices into an embedding batch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MnPairSet {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl MnPairSet {
    /// Check the class and disjointness invariants against `labels`.
    pub fn validate(&self, labels: &[usize]) -> Result<()> {
        let label = |i: usize| {
            labels
                .get(i)
                .copied()
                .ok_or_else(|| Error::config(format!("index {i} out of range")))
        };
        let anchor_class = label(self.anchor)?;
        if self.positives.is_empty() || self.negatives.is_empty() {
            return Err(Error::config("an MN-pair set needs at least one positive and one negative"));
        }
        for &p in &self.positives {
            if p == self.anchor || label(p)? != anchor_class {
                return Err(Error::config(format!("invalid positive {p} for anchor {}", self.anchor)));
            }
        }
        for &n in &self.negatives {
            if label(n)? == anchor_class {
                return Err(Error::config(format!("negative {n} shares the anchor's class")));
            }
        }
        let mut all: Vec<usize> = self.positives.iter().chain(&self.negatives).copied().collect();
        all.push(self.anchor);
        all.sort_unstable();
        if all.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("anchor, positives and negatives must be disjoint"));
        }
        Ok(())
    }

    pub fn members(&self) -> impl Iterator<Item = usize> + '_ {
        std::iter::once(self.anchor)
            .chain(self.positives.iter().copied())
            .chain(self.negatives.iter().copied())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub source_id: String,
    pub class_label: usize,
    /// Raw network output.
    pub embedding: Vec<f64>,
    /// `embedding / max(|embedding|, NORM_EPSILON)`.
    pub normalized: Vec<f64>,
}

impl EmbeddingRecord {
    pub fn new(source_id: impl Into<String>, class_label: usize, embedding: Vec<f64>) -> Self {
        let (normalized, _) = l2_normalize(&embedding);
        EmbeddingRecord {
            source_id: source_id.into(),
            class_label,
            embedding,
            normalized,
        }
    }
}

/// Returns the normalized vector and whether the input was degenerate (norm below the guard).
pub fn l2_normalize(e: &[f64]) -> (Vec<f64>, bool) {
    let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
    let degenerate = norm < NORM_EPSILON;
    let denom = norm.max(NORM_EPSILON);
    (e.iter().map(|x| x / denom).collect(), degenerate)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn scaled_similarity(a: &[f64], b: &[f64], temperature: f64) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::config(format!("temperature must be > 0, got {temperature}")));
    }
    Ok(cosine_similarity(a, b) / temperature)
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// N-pair (InfoNCE) loss for one positive against `negatives`.
pub fn npair_loss(anchor: &[f64], positive: &[f64], negatives: &[&[f64]], temperature: f64) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::config("N-pair loss needs at least one negative"));
    }
    let s = scaled_similarity(anchor, positive, temperature)?;
    let t: Vec<f64> = negatives.iter().map(|n| cosine_similarity(anchor, n) / temperature).collect();
    Ok(log_sum_exp(std::iter::once(s).chain(t.iter().copied())) - s)
}

pub fn mnpair_loss(
    anchor: &[f64],
    positives: &[&[f64]],
    negatives: &[&[f64]],
    config: &LossConfig,
) -> Result<f64> {
    Ok(mnpair_terms(anchor, positives, negatives, config)?.loss)
}

/// Loss and its derivatives with respect to the cosine similarities.
struct MnPairTerms {
    loss: f64,
    d_pos: Vec<f64>,
    d_neg: Vec<f64>,
}

fn mnpair_terms(
    anchor: &[f64],
    positives: &[&[f64]],
    negatives: &[&[f64]],
    config: &LossConfig,
) -> Result<MnPairTerms> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::config("MN-pair loss needs at least one positive and one negative"));
    }
    let tau = config.temperature;
    let log_v = config.positive_weight.ln();
    let log_w = config.negative_weight().ln();
    let a: Vec<f64> = positives.iter().map(|p| log_v + cosine_similarity(anchor, p) / tau).collect();
    let b: Vec<f64> = negatives.iter().map(|n| log_w + cosine_similarity(anchor, n) / tau).collect();
    let lse_all = log_sum_exp(a.iter().chain(&b).copied());
    let lse_pos = log_sum_exp(a.iter().copied());
    let loss = lse_all - lse_pos;
    // dL/ds_j = q_j - p_j, dL/dt_k = q_k with q the softmax over all terms
    // and p the softmax over positive terms; divide by tau for dL/dcos.
    let d_pos = a
        .iter()
        .map(|&x| ((x - lse_all).exp() - (x - lse_pos).exp()) / tau)
        .collect();
    let d_neg = b.iter().map(|&x| (x - lse_all).exp() / tau).collect();
    Ok(MnPairTerms { loss, d_pos, d_neg })
}

/// Mean MN-pair loss over `sets` and its gradient with respect to the raw embeddings.
#[derive(Clone, Debug)]
pub struct BatchLoss<T> {
    pub loss: f64,
    pub grad: Tensor<T>,
    /// Rows whose norm fell below the normalization guard.
    pub degenerate: Vec<usize>,
}

/// `embeddings` is the raw `[B, L]` network output; sets index its rows.
pub fn batch_loss<T: Scalar>(
    embeddings: &Tensor<T>,
    sets: &[MnPairSet],
    config: &LossConfig,
) -> Result<BatchLoss<T>> {
    if sets.is_empty() {
        return Err(Error::config("batch loss needs at least one MN-pair set"));
    }
    let &[b, dim] = embeddings.shape() else {
        return Err(Error::config("embeddings must be [B, L]"));
    };
    let raw: Vec<Vec<f64>> = (0..b)
        .map(|i| embeddings.item(i).iter().map(|x| x.as_f64()).collect())
        .collect();
    let mut degenerate = Vec::new();
    let normalized: Vec<Vec<f64>> = raw
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let (f, deg) = l2_normalize(e);
            if deg {
                degenerate.push(i);
            }
            f
        })
        .collect();
    if !degenerate.is_empty() {
        log::warn!("degenerate (near-zero) embeddings in batch: {degenerate:?}");
    }

    // Gradient with respect to the normalized vectors first.
    let mut grad_f = vec![vec![0.0f64; dim]; b];
    let mut total = 0.0;
    let scale = 1.0 / sets.len() as f64;
    for set in sets {
        if set.members().any(|i| i >= b) {
            return Err(Error::config("MN-pair set index outside the batch"));
        }
        let anchor = &normalized[set.anchor];
        let pos: Vec<&[f64]> = set.positives.iter().map(|&i| normalized[i].as_slice()).collect();
        let neg: Vec<&[f64]> = set.negatives.iter().map(|&i| normalized[i].as_slice()).collect();
        let terms = mnpair_terms(anchor, &pos, &neg, config)?;
        total += terms.loss;
        for (&idx, &d) in set
            .positives
            .iter()
            .chain(&set.negatives)
            .zip(terms.d_pos.iter().chain(&terms.d_neg))
        {
            let g = d * scale;
            for k in 0..dim {
                grad_f[set.anchor][k] += g * normalized[idx][k];
                grad_f[idx][k] += g * normalized[set.anchor][k];
            }
        }
    }

    // Back through F = e / max(|e|, eps).
    let mut grad = Tensor::zeros(&[b, dim]);
    for i in 0..b {
        let norm = raw[i].iter().map(|x| x * x).sum::<f64>().sqrt();
        let out = grad.item_mut(i);
        if norm < NORM_EPSILON {
            for k in 0..dim {
                out[k] = T::from_f64(grad_f[i][k] / NORM_EPSILON);
            }
        } else {
            let f = &normalized[i];
            let proj = cosine_similarity(f, &grad_f[i]);
            for k in 0..dim {
                out[k] = T::from_f64((grad_f[i][k] - f[k] * proj) / norm);
            }
        }
    }
    Ok(BatchLoss {
        loss: total * scale,
        grad,
        degenerate,
    })
}

/// Draw `count` MN-pair sets over a labelled collection.
///
/// Each set takes an anchor and `m - 1` positives from one uniformly chosen
/// class. Negatives come one each from `n - 1` distinct other classes when
/// enough classes exist, otherwise uniformly from all other-class items.
pub fn sample_mnpair_sets(
    labels: &[usize],
    class_names: &[String],
    m: usize,
    n: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<MnPairSet>> {
    if m < 2 || n < 2 {
        return Err(Error::config(format!("M and N must be at least 2, got M={m}, N={n}")));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = (0..class_names.len()).map(|c| (c, Vec::new())).collect();
    for (i, &c) in labels.iter().enumerate() {
        if c >= class_names.len() {
            return Err(Error::config(format!("label {c} has no class name")));
        }
        by_class.entry(c).or_default().push(i);
    }
    for (&c, members) in &by_class {
        if members.len() < m {
            return Err(Error::ClassTooSmall {
                class: class_names[c].clone(),
                available: members.len(),
                required: m,
            });
        }
    }
    let classes: Vec<usize> = by_class.keys().copied().collect();
    if classes.len() < 2 {
        return Err(Error::config("MN-pair sampling needs at least two classes"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sets = Vec::with_capacity(count);
    for _ in 0..count {
        let anchor_class = classes[rng.random_range(0..classes.len())];
        let members = &by_class[&anchor_class];
        let picked: Vec<usize> = index::sample(&mut rng, members.len(), m)
            .into_iter()
            .map(|i| members[i])
            .collect();
        let others: Vec<usize> = classes.iter().copied().filter(|&c| c != anchor_class).collect();
        let negatives: Vec<usize> = if others.len() >= n - 1 {
            index::sample(&mut rng, others.len(), n - 1)
                .into_iter()
                .map(|ci| {
                    let pool = &by_class[&others[ci]];
                    pool[rng.random_range(0..pool.len())]
                })
                .collect()
        } else {
            let pool: Vec<usize> = others.iter().flat_map(|c| by_class[c].iter().copied()).collect();
            if pool.len() < n - 1 {
                return Err(Error::config(format!(
                    "only {} other-class items for {} negatives",
                    pool.len(),
                    n - 1
                )));
            }
            index::sample(&mut rng, pool.len(), n - 1)
                .into_iter()
                .map(|i| pool[i])
                .collect()
        };
        sets.push(MnPairSet {
            anchor: picked[0],
            positives: picked[1..].to_vec(),
            negatives,
        });
    }
    Ok(sets)
}
