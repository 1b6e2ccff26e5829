use serde::{Deserialize, Serialize};

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    /// Gradient (first moment) decay factor.
    pub decay1: f64,
    /// Squared-gradient (second moment) decay factor.
    pub decay2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            decay1: 0.9,
            decay2: 0.99,
            epsilon: 1e-8,
        }
    }
}

/// Moment accumulators for a list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    /// `sizes` lists the element count of every parameter tensor.
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        AdamState {
            config,
            first: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) {
        assert_eq!(params.len(), self.first.len(), "parameter tensor count");
        assert_eq!(grads.len(), self.first.len(), "gradient tensor count");
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let correction1 = 1.0 - c.decay1.powi(t);
        let correction2 = 1.0 - c.decay2.powi(t);
        let b1 = T::from_f64(c.decay1);
        let b2 = T::from_f64(c.decay2);
        let one_b1 = T::from_f64(1.0 - c.decay1);
        let one_b2 = T::from_f64(1.0 - c.decay2);
        let step_size = T::from_f64(c.learning_rate / correction1);
        let inv_sqrt_c2 = T::from_f64(1.0 / correction2.sqrt());
        let eps = T::from_f64(c.epsilon);

        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            assert_eq!(p.len(), g.len(), "gradient shape mirrors parameter shape");
            for (((w, &gi), mi), vi) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *w = *w - step_size * *mi / ((*vi).sqrt() * inv_sqrt_c2 + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = AdamConfig::default();
        assert_eq!((c.learning_rate, c.decay1, c.decay2), (1e-4, 0.9, 0.99));
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut state = AdamState::<f64>::new(AdamConfig::default(), &[3]);
        let mut p = vec![1.0, -2.0, 0.5];
        let before = p.clone();
        state.step(&mut [p.as_mut_slice()], &[&[0.0, 0.0, 0.0]]);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m = 0.1, v = 0.01 -> m_hat = 1, v_hat = 1 -> delta = lr / (1 + eps).
        let mut state = AdamState::<f64>::new(AdamConfig::default(), &[1]);
        let mut p = vec![0.0];
        state.step(&mut [p.as_mut_slice()], &[&[1.0]]);
        let expected = -1e-4 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15, "{}", p[0]);
        assert_eq!(state.step_count(), 1);
    }
}
