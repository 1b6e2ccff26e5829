//! Finite-difference verification of the analytic backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::network::Network;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Number of randomly drawn scalar parameters, spread round-robin over all parameter tensors.
    pub samples: usize,
    /// Initial central-difference step.
    pub step: f64,
    /// Smallest step tried when the estimates at `h` and `h / 10` disagree.
    pub min_step: f64,
    /// Relative disagreement between the two scales that triggers a smaller step.
    pub agreement: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so that parameters with
    /// vanishing gradient are judged on absolute error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            samples: 200,
            step: 1e-5,
            min_step: 1e-9,
            agreement: 2e-5,
            tolerance: 1e-4,
            floor: 1e-8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckSample {
    pub layer: String,
    pub role: &'static str,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Step the numeric estimate was taken with.
    pub step: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub samples: Vec<GradCheckSample>,
    pub max_rel_error: f64,
    pub worst_layer: String,
}

fn rel_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// `objective` maps the network output `[B, L]` to `(loss, dloss/doutput)`.
///
/// Each sampled parameter is perturbed in place and the forward pass is
/// restarted at its layer from the recorded activations. Central differences
/// at `h` and `h / 10` must agree to `options.agreement`, otherwise the step
/// shrinks by 10 (down to `min_step`): a ReLU or pooling kink inside the
/// stencil shows up as a disagreement between the two scales. The coarser
/// estimate of the first agreeing pair is kept, or of the best-agreeing pair
/// when none reaches `options.agreement`.
///
/// Returns [`Error::GradientMismatch`] naming the worst layer when the
/// maximum relative error exceeds `options.tolerance`.
pub fn grad_check<F>(
    net: &Network<f64>,
    batch: &Tensor<f64>,
    objective: F,
    options: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&Tensor<f64>) -> Result<(f64, Tensor<f64>)>,
{
    let (out, tape) = net.forward_recorded_all(batch)?;
    let (_, grad_out) = objective(&out)?;
    let grads = net.backward(&tape, &grad_out)?;

    // (layer index, layer name, role) for every parameter tensor, in slice order.
    let labels: Vec<(usize, String, &'static str)> = net
        .spec()
        .layers
        .iter()
        .zip(&net.params().layers)
        .enumerate()
        .filter(|(_, (_, p))| p.is_some())
        .flat_map(|(i, (l, _))| [(i, l.name.clone(), "weights"), (i, l.name.clone(), "bias")])
        .collect();
    let grad_slices = grads.slices();
    let sizes: Vec<usize> = grad_slices.iter().map(|s| s.len()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut probe = net.clone();
    let mut samples = Vec::with_capacity(options.samples);
    for s in 0..options.samples {
        let t = s % sizes.len();
        let index = rng.random_range(0..sizes[t]);
        let layer = labels[t].0;
        let input = match layer {
            0 => batch,
            l => tape
                .output(l - 1)
                .ok_or_else(|| Error::Usage(format!("layer #{l} input was not recorded")))?,
        };
        let analytic = grad_slices[t][index];
        let original = probe.params().slices()[t][index];

        let mut eval = |value: f64| -> Result<f64> {
            probe.params_mut().slices_mut()[t][index] = value;
            let out = probe.forward_from(input, layer)?;
            Ok(objective(&out)?.0)
        };
        let mut central = |h: f64| -> Result<f64> { Ok((eval(original + h)? - eval(original - h)?) / (2.0 * h)) };
        let mut h = options.step;
        let mut coarse = central(h)?;
        let (mut best_gap, mut numeric, mut step) = (f64::INFINITY, coarse, h);
        loop {
            let fine = central(h / 10.0)?;
            let gap = rel_error(coarse, fine, options.floor);
            if gap < best_gap {
                (best_gap, numeric, step) = (gap, coarse, h);
            }
            if gap <= options.agreement || h / 100.0 < options.min_step {
                break;
            }
            h /= 10.0;
            coarse = fine;
        }
        probe.params_mut().slices_mut()[t][index] = original;

        samples.push(GradCheckSample {
            layer: labels[t].1.clone(),
            role: labels[t].2,
            index,
            analytic,
            numeric,
            step,
            rel_error: rel_error(analytic, numeric, options.floor),
        });
    }

    let worst = samples
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .ok_or_else(|| Error::config("grad_check needs at least one sample"))?;
    let report = GradCheckReport {
        max_rel_error: worst.rel_error,
        worst_layer: worst.layer.clone(),
        samples: samples.clone(),
    };
    if report.max_rel_error > options.tolerance {
        return Err(Error::GradientMismatch {
            layer: report.worst_layer,
            rel_error: report.max_rel_error,
            tolerance: options.tolerance,
        });
    }
    Ok(report)
}
