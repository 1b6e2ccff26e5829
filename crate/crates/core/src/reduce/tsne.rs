//! Exact t-SNE: per-point Gaussian bandwidths calibrated to a target
//! perplexity, symmetrized input affinities, Student-t output affinities and
//! gradient descent with momentum, adaptive gains and early exaggeration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub exaggeration: f64,
    /// Iterations run with exaggerated input affinities and the initial momentum.
    pub exaggeration_iters: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    /// Standard deviation of the Gaussian initial layout.
    pub init_std: f64,
    /// Record the KL divergence every this many iterations.
    pub kl_every: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            init_std: 1e-4,
            kl_every: 10,
            seed: 0,
        }
    }
}

const BISECTION_STEPS: usize = 50;
const ENTROPY_TOLERANCE: f64 = 1e-5;
const MIN_GAIN: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlRecord {
    pub iteration: usize,
    /// KL(P || Q) against the un-exaggerated P.
    pub kl: f64,
    /// Sum of all output affinities; 1 up to rounding.
    pub q_sum: f64,
}

#[derive(Clone, Debug)]
pub struct TsneResult {
    pub points: Vec<[f64; 2]>,
    pub kl_trace: Vec<KlRecord>,
}

fn squared_distances(data: &[Vec<f64>]) -> Vec<f64> {
    let n = data.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = data[i].iter().zip(&data[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

/// Row-stochastic conditional affinities `p_{j|i}` (row-major `n x n`, zero diagonal).
///
/// Each row's precision is found by bisection so that the row entropy is
/// `ln(perplexity)`, stopping after 50 steps or at tolerance 1e-5.
pub fn conditional_affinities(data: &[Vec<f64>], perplexity: f64) -> Vec<f64> {
    let n = data.len();
    let dist = squared_distances(data);
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    let mut row = vec![0.0; n];
    for i in 0..n {
        let d = &dist[i * n..(i + 1) * n];
        // Shifting by the nearest distance leaves the normalized row unchanged
        // and keeps the exponentials representable.
        let dmin = (0..n).filter(|&j| j != i).map(|j| d[j]).fold(f64::INFINITY, f64::min);
        let (mut beta, mut lo, mut hi) = (1.0f64, 0.0f64, f64::INFINITY);
        for _ in 0..BISECTION_STEPS {
            let mut sum = 0.0;
            let mut weighted = 0.0;
            for j in 0..n {
                row[j] = if j == i { 0.0 } else { (-(d[j] - dmin) * beta).exp() };
                sum += row[j];
                weighted += (d[j] - dmin) * row[j];
            }
            let entropy = sum.ln() + beta * weighted / sum;
            let diff = entropy - target;
            if diff.abs() < ENTROPY_TOLERANCE {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_infinite() { beta * 2.0 } else { (beta + hi) / 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        let sum: f64 = row.iter().sum();
        for j in 0..n {
            p[i * n + j] = row[j] / sum;
        }
    }
    p
}

/// Symmetrized joint affinities `(p_{j|i} + p_{i|j}) / 2n`; sums to 1.
pub fn joint_affinities(conditional: &[f64], n: usize) -> Vec<f64> {
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (conditional[i * n + j] + conditional[j * n + i]) / (2.0 * n as f64);
        }
    }
    p
}

/// Student-t (one degree of freedom) kernel values and their sum over `i != j`.
fn student_t(points: &[[f64; 2]], num: &mut [f64]) -> f64 {
    let n = points.len();
    let mut z = 0.0;
    for i in 0..n {
        num[i * n + i] = 0.0;
        for j in i + 1..n {
            let dx = points[i][0] - points[j][0];
            let dy = points[i][1] - points[j][1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = v;
            num[j * n + i] = v;
            z += 2.0 * v;
        }
    }
    z
}

/// Output affinities `q_ij` for a layout (row-major, zero diagonal, sums to 1).
pub fn output_affinities(points: &[[f64; 2]]) -> Vec<f64> {
    let n = points.len();
    let mut num = vec![0.0; n * n];
    let z = student_t(points, &mut num);
    num.iter().map(|v| v / z).collect()
}

pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum()
}

/// `KL(P || Q)` for the layout whose Student-t kernel is `num` with sum `z`.
fn layout_kl(p: &[f64], num: &[f64], z: f64) -> f64 {
    p.iter()
        .zip(num)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &w)| pi * (pi * z / w).ln())
        .sum()
}

/// After early exaggeration a step that raises the KL divergence is undone
/// and the momentum reset, so the recorded KL never increases from there on.
pub fn tsne_reduce(data: &[Vec<f64>], config: &TsneConfig) -> Result<TsneResult> {
    let n = data.len();
    if n < 4 {
        return Err(Error::config(format!("t-SNE needs at least 4 points, got {n}")));
    }
    if data.iter().any(|r| r.len() != data[0].len()) {
        return Err(Error::config("t-SNE input rows differ in dimension"));
    }
    let max_perplexity = (n - 1) as f64 / 3.0;
    if !(config.perplexity > 0.0 && config.perplexity < max_perplexity) {
        return Err(Error::config(format!(
            "perplexity {} must be in (0, {max_perplexity:.3}) for {n} points",
            config.perplexity
        )));
    }

    let p = joint_affinities(&conditional_affinities(data, config.perplexity), n);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::config(e.to_string()))?;
    let mut y: Vec<[f64; 2]> = (0..n)
        .map(|_| [normal.sample(&mut rng), normal.sample(&mut rng)])
        .collect();
    let mut velocity = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut num = vec![0.0; n * n];
    let mut grad = vec![[0.0f64; 2]; n];
    let mut trace = Vec::new();

    let mut z = student_t(&y, &mut num);
    let mut kl = layout_kl(&p, &num, z);
    let mut step_scale = 1.0;
    for iter in 0..config.iterations {
        let exaggerating = iter < config.exaggeration_iters;
        let exag = if exaggerating { config.exaggeration } else { 1.0 };
        let momentum = if exaggerating { config.initial_momentum } else { config.final_momentum };

        for i in 0..n {
            let (mut gx, mut gy) = (0.0, 0.0);
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = num[i * n + j];
                let coeff = (exag * p[i * n + j] - w / z) * w;
                gx += coeff * (y[i][0] - y[j][0]);
                gy += coeff * (y[i][1] - y[j][1]);
            }
            grad[i] = [4.0 * gx, 4.0 * gy];
        }
        let previous = y.clone();
        for i in 0..n {
            for d in 0..2 {
                let g = grad[i][d];
                gains[i][d] = if (g > 0.0) != (velocity[i][d] > 0.0) {
                    gains[i][d] + 0.2
                } else {
                    (gains[i][d] * 0.8).max(MIN_GAIN)
                };
                velocity[i][d] =
                    momentum * velocity[i][d] - step_scale * config.learning_rate * gains[i][d] * g;
                y[i][d] += velocity[i][d];
            }
        }
        let (mx, my) = y.iter().fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
        for pt in &mut y {
            pt[0] -= mx / n as f64;
            pt[1] -= my / n as f64;
        }

        z = student_t(&y, &mut num);
        let next_kl = layout_kl(&p, &num, z);
        if exaggerating || next_kl <= kl {
            kl = next_kl;
            if !exaggerating {
                step_scale = (step_scale * 1.1).min(1.0);
            }
        } else {
            // Restart: undo the step, drop the momentum and shrink the step.
            y = previous;
            velocity.iter_mut().for_each(|v| *v = [0.0; 2]);
            gains.iter_mut().for_each(|g| *g = [1.0; 2]);
            step_scale = (step_scale * 0.5).max(1e-6);
            z = student_t(&y, &mut num);
        }
        if config.kl_every > 0 && (iter + 1) % config.kl_every == 0 {
            trace.push(KlRecord {
                iteration: iter + 1,
                kl,
                q_sum: num.iter().sum::<f64>() / z,
            });
        }
    }
    if trace.last().map(|r| r.iteration) != Some(config.iterations) {
        trace.push(KlRecord {
            iteration: config.iterations,
            kl,
            q_sum: num.iter().sum::<f64>() / z,
        });
    }
    if y.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::NonFinite { layer: "t-SNE layout".into() });
    }
    Ok(TsneResult { points: y, kl_trace: trace })
}
