//! Random erasing: with some probability, overwrite one random rectangle
//! with uniform noise.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErasingParams {
    pub probability: f64,
    /// Erased area as a fraction of the image, `[min, max]`.
    pub area_fraction: (f64, f64),
    /// Height/width ratio of the rectangle, `[min, max]`.
    pub aspect_ratio: (f64, f64),
}

impl Default for ErasingParams {
    fn default() -> Self {
        ErasingParams {
            probability: 0.5,
            area_fraction: (0.02, 0.2),
            aspect_ratio: (0.3, 3.3),
        }
    }
}

/// Rectangle `(top, left, height, width)` in pixels.
pub type Rect = (usize, usize, usize, usize);

const MAX_ATTEMPTS: usize = 100;

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Erase in place on an `[H, W, C]` image. Returns the erased rectangle, if any.
pub fn random_erasing<R: Rng + ?Sized>(image: &mut Tensor<f32>, params: &ErasingParams, rng: &mut R) -> Option<Rect> {
    if params.probability <= 0.0 || rng.random::<f64>() >= params.probability {
        return None;
    }
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let area = (h * w) as f64;
    for _ in 0..MAX_ATTEMPTS {
        let target = uniform(rng, params.area_fraction) * area;
        let ratio = uniform(rng, params.aspect_ratio);
        let eh = (target * ratio).sqrt().round() as usize;
        let ew = (target / ratio).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh >= h || ew >= w {
            continue;
        }
        let top = rng.random_range(0..=h - eh);
        let left = rng.random_range(0..=w - ew);
        let data = image.data_mut();
        for y in top..top + eh {
            for x in left..left + ew {
                for ch in 0..c {
                    data[(y * w + x) * c + ch] = rng.random::<f32>();
                }
            }
        }
        return Some((top, left, eh, ew));
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gradient_image() -> Tensor<f32> {
        Tensor::from_fn(&[40, 50, 3], |i| (i % 97) as f32 / 96.0)
    }

    #[test]
    fn probability_zero_is_identity() {
        let mut img = gradient_image();
        let before = img.clone();
        let p = ErasingParams { probability: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            assert!(random_erasing(&mut img, &p, &mut rng).is_none());
        }
        assert_eq!(img, before);
    }

    #[test]
    fn erases_one_rectangle_of_requested_area() {
        let p = ErasingParams {
            probability: 1.0,
            area_fraction: (0.1, 0.1),
            aspect_ratio: (0.3, 3.3),
        };
        for seed in 0..20 {
            let mut img = gradient_image();
            let before = img.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (top, left, eh, ew) = random_erasing(&mut img, &p, &mut rng).unwrap();
            // Bounding box of changed pixels sits inside the reported rectangle.
            let (mut y0, mut y1, mut x0, mut x1, mut changed) = (usize::MAX, 0, usize::MAX, 0, 0);
            for y in 0..40 {
                for x in 0..50 {
                    let i = (y * 50 + x) * 3;
                    if (0..3).any(|c| img.data()[i + c] != before.data()[i + c]) {
                        changed += 1;
                        y0 = y0.min(y);
                        y1 = y1.max(y);
                        x0 = x0.min(x);
                        x1 = x1.max(x);
                    }
                }
            }
            assert!(y0 >= top && y1 < top + eh && x0 >= left && x1 < left + ew);
            // Random fills almost surely touch every pixel of the rectangle.
            assert_eq!(changed, eh * ew);
            let frac = (eh * ew) as f64 / 2000.0;
            assert!((frac - 0.1).abs() < 0.02, "area fraction {frac}");
            let ratio = eh as f64 / ew as f64;
            assert!(ratio > 0.2 && ratio < 4.0, "aspect {ratio}");
        }
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let p = ErasingParams { probability: 1.0, ..Default::default() };
        let mut a = gradient_image();
        let mut b = gradient_image();
        random_erasing(&mut a, &p, &mut ChaCha8Rng::seed_from_u64(3));
        random_erasing(&mut b, &p, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn keeps_shape_and_range(seed in any::<u64>(), prob in 0.0f64..=1.0) {
            let mut img = gradient_image();
            let p = ErasingParams { probability: prob, ..Default::default() };
            random_erasing(&mut img, &p, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(img.shape(), &[40, 50, 3]);
            prop_assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
