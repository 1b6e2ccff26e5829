//! Grad-CAM for an embedding network.
//!
//! There is no class logit to differentiate, so the explained scalar is the
//! squared norm `y = sum_m U_m^2` of a reduction vector `U` near the output.
//! Its gradient with respect to a feature map `A` is averaged over space into
//! one weight per channel, and the rectified weighted sum of the channels,
//! upsampled to the input and scaled by its maximum, is the heatmap.

use std::path::Path;

use image::{GrayImage, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::{jet, resize_bilinear, to_byte};
use crate::nn::{LayerKind, Network};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplainConfig {
    /// Layer whose activations are weighted into the map.
    pub feature_layer: String,
    /// Layer whose output is reduced to the explained score.
    pub reduction_layer: String,
    /// Use the rectified output when the reduction layer is followed by a ReLU.
    pub post_activation: bool,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            feature_layer: "relu4".into(),
            reduction_layer: "fc1".into(),
            post_activation: true,
        }
    }
}

/// Non-negative map in `[0, 1]`, row-major `height x width`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([to_byte(self.values[y as usize * self.width + x as usize] as f32)])
        })
    }

    /// Blend the jet-colored map over an RGB image `[H, W, 3]` in `[0, 1]`.
    pub fn overlay(&self, image: &Tensor<f32>, opacity: f32) -> Result<RgbImage> {
        if image.shape() != [self.height, self.width, 3] {
            return Err(Error::config(format!(
                "overlay image {:?} does not match a {}x{} heatmap",
                image.shape(),
                self.height,
                self.width
            )));
        }
        let opacity = opacity.clamp(0.0, 1.0);
        Ok(RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = y as usize * self.width + x as usize;
            let color = jet(self.values[p] as f32);
            let px = &image.data()[p * 3..p * 3 + 3];
            image::Rgb(std::array::from_fn(|c| to_byte(px[c] * (1.0 - opacity) + color[c] * opacity)))
        }))
    }
}

/// Result of explaining one image.
#[derive(Clone, Debug)]
pub struct Explanation {
    /// Reduced similarity score `sum U^2`.
    pub score: f64,
    /// Per-channel importance weights.
    pub weights: Vec<f64>,
    pub heatmap: Heatmap,
}

/// Per-image JSON record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub source_id: String,
    pub score: f64,
    pub weights: Vec<f64>,
}

/// `sum_m U_m^2`.
pub fn reduced_similarity_score(u: &[f64]) -> f64 {
    u.iter().map(|v| v * v).sum()
}

/// Gradient of [`reduced_similarity_score`]: `2 U`.
pub fn reduced_similarity_gradient(u: &[f64]) -> Vec<f64> {
    u.iter().map(|v| 2.0 * v).collect()
}

/// Spatial mean of `dY/dA` per channel. `grad` is `[H, W, K]`.
pub fn similarity_importance_weights(grad: &Tensor<f64>) -> Result<Vec<f64>> {
    let [h, w, k] = spatial_dims(grad, "gradient")?;
    let mut alpha = vec![0.0; k];
    for px in grad.data().chunks_exact(k) {
        for (a, g) in alpha.iter_mut().zip(px) {
            *a += g;
        }
    }
    let area = (h * w) as f64;
    alpha.iter_mut().for_each(|a| *a /= area);
    Ok(alpha)
}

/// `sum_m alpha_m A^m` at feature-map resolution, before rectification.
pub fn weighted_activation(activations: &Tensor<f64>, alpha: &[f64]) -> Result<Vec<f64>> {
    let [_, _, k] = spatial_dims(activations, "activations")?;
    if alpha.len() != k {
        return Err(Error::config(format!("{} weights for {k} channels", alpha.len())));
    }
    Ok(activations
        .data()
        .chunks_exact(k)
        .map(|px| px.iter().zip(alpha).map(|(a, w)| a * w).sum())
        .collect())
}

/// Rectify the weighted activation sum, upsample it bilinearly to
/// `out_h x out_w` and divide by its maximum. An all-zero map stays zero.
pub fn gradcam_map(activations: &Tensor<f64>, alpha: &[f64], out_h: usize, out_w: usize) -> Result<Heatmap> {
    let [h, w, _] = spatial_dims(activations, "activations")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::config("heatmap size must be positive"));
    }
    let mut sum = weighted_activation(activations, alpha)?;
    sum.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut values = resize_bilinear(&sum, h, w, 1, out_h, out_w);
    let max = values.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v = (*v / max).clamp(0.0, 1.0));
    }
    Ok(Heatmap {
        height: out_h,
        width: out_w,
        values,
    })
}

fn spatial_dims(t: &Tensor<f64>, what: &str) -> Result<[usize; 3]> {
    match *t.shape() {
        [h, w, k] if h > 0 && w > 0 && k > 0 => Ok([h, w, k]),
        ref other => Err(Error::config(format!("{what} must be a non-empty [H, W, K] map, got {other:?}"))),
    }
}

/// Score, reduction vector and feature-layer quantities for one image.
#[derive(Clone, Debug)]
pub struct ScoreGradient {
    pub score: f64,
    pub reduction: Vec<f64>,
    /// Feature-layer activations `[H, W, K]`.
    pub activations: Tensor<f64>,
    /// `dY/dA`, same shape as `activations`.
    pub gradient: Tensor<f64>,
}

/// Layer indices `(feature, reduction vector, backward top)` for `config`.
fn resolve_layers(network: &Network<f64>, config: &ExplainConfig) -> Result<(usize, usize)> {
    let spec = network.spec();
    let feature = spec.layer_index(&config.feature_layer)?;
    let reduction = spec.layer_index(&config.reduction_layer)?;
    if feature >= reduction {
        return Err(Error::config(format!(
            "feature layer `{}` must precede reduction layer `{}`",
            config.feature_layer, config.reduction_layer
        )));
    }
    let rectified = config.post_activation
        && spec
            .layers
            .get(reduction + 1)
            .is_some_and(|l| l.kind == LayerKind::Relu);
    Ok((feature, if rectified { reduction + 1 } else { reduction }))
}

/// Forward `image` (`[H, W, C]`), evaluate the reduced similarity score and
/// backpropagate it to the feature layer.
pub fn score_gradient(network: &Network<f64>, image: &Tensor<f64>, config: &ExplainConfig) -> Result<ScoreGradient> {
    let (feature, u_layer) = resolve_layers(network, config)?;
    let [h, w, c] = network.spec().input_shape;
    if image.shape() != [h, w, c] {
        return Err(Error::config(format!(
            "image shape {:?} does not match network input {:?}",
            image.shape(),
            [h, w, c]
        )));
    }
    let batch = image.clone().reshape(&[1, h, w, c])?;
    let (_, tape) = network.forward_recorded_all(&batch)?;
    let recorded = |layer: usize| {
        tape.output(layer)
            .ok_or_else(|| Error::Usage(format!("layer #{layer} was not recorded")))
    };
    let reduction = recorded(u_layer)?.data().to_vec();
    let score = reduced_similarity_score(&reduction);
    let upstream = Tensor::from_vec(&[1, reduction.len()], reduced_similarity_gradient(&reduction))?;
    let (_, grad) = network.backward_between(&tape, u_layer + 1, &upstream, feature + 1)?;
    let shape = network.spec().output_shapes()?[feature];
    Ok(ScoreGradient {
        score,
        reduction,
        activations: recorded(feature)?.clone().reshape(&shape)?,
        gradient: grad.reshape(&shape)?,
    })
}

/// Heatmap at input resolution for one image.
pub fn explain_image(network: &Network<f64>, image: &Tensor<f64>, config: &ExplainConfig) -> Result<Explanation> {
    let sg = score_gradient(network, image, config)?;
    let weights = similarity_importance_weights(&sg.gradient)?;
    let [h, w, _] = network.spec().input_shape;
    let heatmap = gradcam_map(&sg.activations, &weights, h, w)?;
    Ok(Explanation {
        score: sg.score,
        weights,
        heatmap,
    })
}

/// Write `<stem>_heatmap.png`, `<stem>_overlay.png` and `<stem>.json` into `dir`.
pub fn write_explanation(
    dir: &Path,
    stem: &str,
    source_id: &str,
    image: &Tensor<f32>,
    explanation: &Explanation,
    opacity: f32,
) -> Result<()> {
    use crate::imageops::save_png;
    let gray = explanation.heatmap.to_gray();
    let path = dir.join(format!("{stem}_heatmap.png"));
    gray.save_with_format(&path, image::ImageFormat::Png)?;
    save_png(&explanation.heatmap.overlay(image, opacity)?, &dir.join(format!("{stem}_overlay.png")))?;
    crate::io::write_json(
        &dir.join(format!("{stem}.json")),
        &ExplanationRecord {
            source_id: source_id.to_owned(),
            score: explanation.score,
            weights: explanation.weights.clone(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::NetworkSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_net(seed: u64) -> Network<f64> {
        Network::new(NetworkSpec::damage_embedding(16, 4), seed).unwrap()
    }

    fn image(seed: u64, size: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[size, size, 3], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn score_examples() {
        assert_eq!(reduced_similarity_score(&[0.0; 5]), 0.0);
        assert_eq!(reduced_similarity_score(&[1.0, -2.0, 0.0]), 5.0);
        assert_eq!(reduced_similarity_gradient(&[1.0, -2.0]), vec![2.0, -4.0]);
    }

    #[test]
    fn weights_are_spatial_means() {
        let g = Tensor::from_fn(&[3, 2, 2], |i| if i % 2 == 0 { 1.5 } else { -0.5 });
        assert_eq!(similarity_importance_weights(&g).unwrap(), vec![1.5, -0.5]);
        let z = Tensor::zeros(&[4, 4, 3]);
        assert_eq!(similarity_importance_weights(&z).unwrap(), vec![0.0; 3]);
        assert!(similarity_importance_weights(&Tensor::zeros(&[4, 4])).is_err());
    }

    #[test]
    fn map_examples() {
        let a = Tensor::from_fn(&[4, 4, 2], |i| i as f64);
        assert!(gradcam_map(&a, &[0.0, 0.0], 8, 8).unwrap().is_zero());
        assert!(gradcam_map(&a, &[-1.0, -1.0], 8, 8).unwrap().is_zero());
        assert!(gradcam_map(&a, &[1.0], 8, 8).is_err());

        let mut hot = Tensor::zeros(&[4, 4, 1]);
        hot.data_mut()[2 * 4 + 1] = 3.0;
        let map = gradcam_map(&hot, &[1.0], 4, 4).unwrap();
        assert_eq!(map.values[2 * 4 + 1], 1.0);
        let up = gradcam_map(&hot, &[1.0], 8, 8).unwrap();
        let argmax = (0..64).max_by(|&i, &j| up.values[i].total_cmp(&up.values[j])).unwrap();
        assert_eq!((argmax / 8 / 2, argmax % 8 / 2), (2, 1));
        assert!((up.max() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn weighted_sum_is_linear_and_map_scale_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Tensor::from_fn(&[5, 5, 3], |_| rng.random_range(0.0..1.0));
        let alpha = [0.7, -0.2, 0.4];
        let doubled = Tensor::from_fn(a.shape(), |i| 2.0 * a.data()[i]);
        let s1 = weighted_activation(&a, &alpha).unwrap();
        let s2 = weighted_activation(&doubled, &alpha).unwrap();
        for (x, y) in s1.iter().zip(&s2) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
        let m1 = gradcam_map(&a, &alpha, 10, 10).unwrap();
        let m2 = gradcam_map(&doubled, &alpha, 10, 10).unwrap();
        for (x, y) in m1.values.iter().zip(&m2.values) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_gradient_matches_finite_differences() {
        let net = small_net(8);
        let cfg = ExplainConfig::default();
        let img = image(1, 16);
        let sg = score_gradient(&net, &img, &cfg).unwrap();
        assert!(sg.score > 0.0);

        // y as a function of the relu4 activations, through fc1 and relu5.
        let fc1 = net.params().layers[net.spec().layer_index("fc1").unwrap()].as_ref().unwrap();
        let y = |a: &[f64]| -> f64 {
            let k = fc1.bias.len();
            (0..k)
                .map(|o| {
                    let z = fc1.bias.data()[o] + a.iter().enumerate().map(|(i, v)| v * fc1.weights.data()[i * k + o]).sum::<f64>();
                    z.max(0.0).powi(2)
                })
                .sum()
        };
        assert!((y(sg.activations.data()) - sg.score).abs() < 1e-10 * sg.score.max(1.0));
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in (0..sg.activations.len()).step_by(3) {
            let mut ap = sg.activations.data().to_vec();
            ap[i] += h;
            let mut am = sg.activations.data().to_vec();
            am[i] -= h;
            let num = (y(&ap) - y(&am)) / (2.0 * h);
            let ana = sg.gradient.data()[i];
            worst = worst.max((num - ana).abs() / num.abs().max(ana.abs()).max(1e-8));
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn heatmap_range_and_zero_reduction() {
        let mut net = small_net(2);
        let cfg = ExplainConfig::default();
        for s in 0..3 {
            let e = explain_image(&net, &image(s, 16), &cfg).unwrap();
            assert_eq!((e.heatmap.height, e.heatmap.width), (16, 16));
            assert!(e.heatmap.values.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(e.weights.len(), 128);
        }
        let fc1 = net.spec().layer_index("fc1").unwrap();
        let p = net.params_mut().layers[fc1].as_mut().unwrap();
        p.weights.data_mut().fill(0.0);
        p.bias.data_mut().fill(0.0);
        let e = explain_image(&net, &image(9, 16), &cfg).unwrap();
        assert_eq!(e.score, 0.0);
        assert!(e.weights.iter().all(|&w| w == 0.0));
        assert!(e.heatmap.is_zero());
    }

    #[test]
    fn pre_activation_reduction_uses_fc_output() {
        let net = small_net(3);
        let img = image(5, 16);
        let pre = ExplainConfig {
            post_activation: false,
            ..ExplainConfig::default()
        };
        let a = score_gradient(&net, &img, &pre).unwrap();
        let b = score_gradient(&net, &img, &ExplainConfig::default()).unwrap();
        assert!(a.reduction.iter().any(|&v| v < 0.0));
        let rectified: Vec<f64> = a.reduction.iter().map(|v| v.max(0.0)).collect();
        assert_eq!(rectified, b.reduction);
    }

    #[test]
    fn bad_layer_names_are_config_errors() {
        let net = small_net(0);
        let img = image(0, 16);
        let unknown = ExplainConfig {
            feature_layer: "conv9".into(),
            ..ExplainConfig::default()
        };
        assert!(matches!(explain_image(&net, &img, &unknown), Err(Error::Config(_))));
        let reversed = ExplainConfig {
            feature_layer: "fc1".into(),
            reduction_layer: "relu4".into(),
            post_activation: true,
        };
        assert!(matches!(explain_image(&net, &img, &reversed), Err(Error::Config(_))));
    }

    #[test]
    fn overlay_and_files() {
        let net = small_net(1);
        let img = image(2, 16);
        let e = explain_image(&net, &img, &ExplainConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_explanation(dir.path(), "x", "a/b.png", &img.cast(), &e, 0.5).unwrap();
        for f in ["x_heatmap.png", "x_overlay.png", "x.json"] {
            assert!(dir.path().join(f).exists());
        }
        let rec: ExplanationRecord = crate::io::read_json(&dir.path().join("x.json")).unwrap();
        assert_eq!(rec.weights, e.weights);
        assert!(e.heatmap.overlay(&Tensor::zeros(&[4, 4, 3]), 0.5).is_err());
    }
}
