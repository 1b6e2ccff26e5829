//! Image decoding, bilinear resampling and simple raster helpers shared by
//! the data pipeline, the explanation maps and the report figures.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Bilinear resampling of a row-major `[h, w, c]` buffer with half-pixel
/// centres and edge clamping.
pub fn resize_bilinear<T: Scalar>(src: &[T], h: usize, w: usize, c: usize, oh: usize, ow: usize) -> Vec<T> {
    assert_eq!(src.len(), h * w * c);
    let mut out = vec![T::zero(); oh * ow * c];
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let coord = |o: usize, scale: f64, n: usize| -> (usize, usize, T) {
        let f = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = f.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, T::from_f64(f - i0 as f64))
    };
    let one = T::one();
    for oy in 0..oh {
        let (y0, y1, fy) = coord(oy, sy, h);
        for ox in 0..ow {
            let (x0, x1, fx) = coord(ox, sx, w);
            for ch in 0..c {
                let p = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = p(y0, x0) * (one - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (one - fx) + p(y1, x1) * fx;
                out[(oy * ow + ox) * c + ch] = top * (one - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Decode any supported file to RGB in `[0, 1]`, resized to `size x size`.
pub fn load_rgb(path: &Path, size: usize) -> Result<Tensor<f32>> {
    let img = image::open(path)?.to_rgb8();
    Ok(rgb8_to_tensor(&img, size))
}

pub fn rgb8_to_tensor(img: &RgbImage, size: usize) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw: Vec<f32> = img.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
    let data = if (h, w) == (size, size) {
        raw
    } else {
        resize_bilinear(&raw, h, w, 3, size, size)
    };
    Tensor::from_vec(&[size, size, 3], data).expect("resized buffer matches shape")
}

pub fn tensor_to_rgb8(t: &Tensor<f32>) -> RgbImage {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let bytes: Vec<u8> = t.data().iter().map(|&v| to_byte(v)).collect();
    RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches dimensions")
}

pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other),
        })
}

/// Classic "jet" colormap for `v` in `[0, 1]`.
pub fn jet(v: f32) -> [f32; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |offset: f32| (1.5 - (4.0 * v - offset).abs()).clamp(0.0, 1.0);
    [ch(3.0), ch(2.0), ch(1.0)]
}

/// Evenly spaced hues, used to color clusters.
pub fn hsv_palette(n: usize) -> Vec<Rgb<u8>> {
    (0..n)
        .map(|i| {
            let h = i as f32 / n.max(1) as f32 * 6.0;
            let x = 1.0 - (h % 2.0 - 1.0).abs();
            let (r, g, b) = match h as usize {
                0 => (1.0, x, 0.0),
                1 => (x, 1.0, 0.0),
                2 => (0.0, 1.0, x),
                3 => (0.0, x, 1.0),
                4 => (x, 0.0, 1.0),
                _ => (1.0, 0.0, x),
            };
            Rgb([to_byte(r * 0.9), to_byte(g * 0.9), to_byte(b * 0.9)])
        })
        .collect()
}
