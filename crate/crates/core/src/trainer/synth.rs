//! Procedural texture classes standing in for surface-damage imagery.
//!
//! Class `c` uses pattern `c % 4` (oriented stripes, blotches, thin cracks,
//! plain noise); classes beyond the fourth reuse a pattern rotated by 45
//! degrees and tinted, so any `k >= 2` works.

use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::{save_png, tensor_to_rgb8};
use crate::tensor::Tensor;

const PATTERNS: [&str; 4] = ["stripes", "blotches", "cracks", "noise"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    /// Side length in pixels (64-160 is typical).
    pub size: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 4,
            per_class: 200,
            size: 160,
            seed: 0,
        }
    }
}

pub fn class_name(class: usize) -> String {
    let base = PATTERNS[class % 4];
    match class / 4 {
        0 => format!("{class}_{base}"),
        v => format!("{class}_{base}_v{v}"),
    }
}

/// Render one image of `class` as `[size, size, 3]` in `[0, 1]`.
pub fn render(class: usize, index: usize, size: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((class as u64) << 32) | index as u64);
    let variant = class / 4;
    let rotation = variant as f32 * PI / 4.0;
    let tint = variant as f32 * 0.08;
    let s = size as f32;
    let noise = Normal::new(0.0f32, 1.0).expect("unit normal");
    let mut img = Tensor::zeros(&[size, size, 3]);

    let jitter = |rng: &mut ChaCha8Rng, base: [f32; 3]| -> [f32; 3] {
        let d = rng.random_range(-0.04f32..0.04);
        [base[0] + d + tint, base[1] + d + rng.random_range(-0.02f32..0.02), base[2] + d - tint]
    };

    match class % 4 {
        0 => {
            let base = jitter(&mut rng, [0.42, 0.48, 0.60]);
            let angle = rotation + rng.random_range(-0.26f32..0.26);
            let period = s * rng.random_range(0.07f32..0.12);
            let amp = rng.random_range(0.15f32..0.25);
            let phase = rng.random_range(0.0f32..2.0 * PI);
            let (sin, cos) = angle.sin_cos();
            for y in 0..size {
                for x in 0..size {
                    // stripes run along `angle`: intensity varies across it
                    let t = -(x as f32) * sin + y as f32 * cos;
                    let v = amp * (2.0 * PI * t / period + phase).sin();
                    let n = 0.03 * noise.sample(&mut rng);
                    put(&mut img, size, x, y, base, v + n);
                }
            }
        }
        1 => {
            let base = jitter(&mut rng, [0.58, 0.46, 0.34]);
            let blobs: Vec<(f32, f32, f32, f32)> = (0..rng.random_range(3..=6))
                .map(|_| {
                    (
                        rng.random_range(0.0..s),
                        rng.random_range(0.0..s),
                        s * rng.random_range(0.06f32..0.15),
                        rng.random_range(0.25f32..0.45),
                    )
                })
                .collect();
            for y in 0..size {
                for x in 0..size {
                    let mut v = 0.0;
                    for &(cx, cy, r, depth) in &blobs {
                        let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                        v -= depth * (-d2 / (2.0 * r * r)).exp();
                    }
                    let n = 0.03 * noise.sample(&mut rng);
                    put(&mut img, size, x, y, base, v + n);
                }
            }
        }
        2 => {
            let base = jitter(&mut rng, [0.62, 0.61, 0.58]);
            for y in 0..size {
                for x in 0..size {
                    let n = 0.04 * noise.sample(&mut rng);
                    put(&mut img, size, x, y, base, n);
                }
            }
            for _ in 0..rng.random_range(1..=2) {
                draw_crack(&mut img, size, rotation, &mut rng);
            }
        }
        _ => {
            let base = jitter(&mut rng, [0.44, 0.56, 0.44]);
            let sigma = rng.random_range(0.06f32..0.10);
            for y in 0..size {
                for x in 0..size {
                    let n = sigma * noise.sample(&mut rng);
                    put(&mut img, size, x, y, base, n);
                }
            }
        }
    }
    img
}

fn put(img: &mut Tensor<f32>, size: usize, x: usize, y: usize, base: [f32; 3], delta: f32) {
    let px = &mut img.data_mut()[(y * size + x) * 3..][..3];
    for (p, b) in px.iter_mut().zip(base) {
        *p = (b + delta).clamp(0.0, 1.0);
    }
}

/// A dark random walk across the image, 1-2 px wide.
fn draw_crack(img: &mut Tensor<f32>, size: usize, rotation: f32, rng: &mut ChaCha8Rng) {
    let s = size as f32;
    let mut heading = rotation + rng.random_range(-0.6f32..0.6) + if rng.random() { 0.0 } else { PI / 2.0 };
    let (mut x, mut y) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
    // start from an edge-ish point by walking backwards first
    x -= heading.cos() * s * 0.6;
    y -= heading.sin() * s * 0.6;
    let width = rng.random_range(1..=2) as isize;
    let darkness = rng.random_range(0.35f32..0.5);
    for _ in 0..(size * 3) {
        heading += rng.random_range(-0.25f32..0.25);
        x += heading.cos() * 0.7;
        y += heading.sin() * 0.7;
        for dy in 0..width {
            for dx in 0..width {
                let (px, py) = (x as isize + dx, y as isize + dy);
                if px >= 0 && py >= 0 && (px as usize) < size && (py as usize) < size {
                    let p = &mut img.data_mut()[(py as usize * size + px as usize) * 3..][..3];
                    for c in p.iter_mut() {
                        *c = (*c - darkness).max(0.0);
                    }
                }
            }
        }
    }
}

/// Write `root/<class>/<class>_<i>.png` for every image. Returns the class directories.
pub fn generate_synthetic_dataset(spec: &SynthSpec, root: &Path) -> Result<Vec<PathBuf>> {
    if spec.classes < 2 {
        return Err(Error::config("synthetic dataset needs at least 2 classes"));
    }
    if spec.size < 8 {
        return Err(Error::config("synthetic images must be at least 8 px"));
    }
    let mut dirs = Vec::with_capacity(spec.classes);
    for class in 0..spec.classes {
        let name = class_name(class);
        let dir = root.join(&name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..spec.per_class {
            let img = render(class, i, spec.size, spec.seed);
            save_png(&tensor_to_rgb8(&img), &dir.join(format!("{name}_{i:04}.png")))?;
        }
        dirs.push(dir);
    }
    Ok(dirs)
}
