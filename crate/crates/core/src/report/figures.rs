//! Report figures: per-cluster image tiles, heatmap grids and scatter plots.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::retrieval::top_k;
use crate::contrastive::EmbeddingRecord;
use crate::error::{Error, Result};
use crate::explain::{explain_image, ExplainConfig};
use crate::imageops::{hsv_palette, resize_bilinear, tensor_to_rgb8};
use crate::nn::Network;
use crate::reduce::{ClusterAssignment, PointRole};
use crate::tensor::Tensor;

/// Exemplar plus its nine nearest cluster members.
pub const TILE_COLUMNS: usize = 10;
const GAP: u32 = 2;
const BLANK: Rgb<u8> = Rgb([235, 235, 235]);
const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const NOISE_COLOR: Rgb<u8> = Rgb([160, 160, 160]);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileRow {
    /// Cluster id from 1.
    pub cluster: usize,
    /// Point indices: the exemplar, then its nearest cluster members by
    /// descending cosine similarity. At most [`TILE_COLUMNS`] entries.
    pub members: Vec<usize>,
}

/// The core point with the most eps-neighbours, ties by source id.
pub fn cluster_exemplar(assignment: &ClusterAssignment, records: &[EmbeddingRecord], cluster: usize) -> Option<usize> {
    (0..assignment.labels.len())
        .filter(|&i| assignment.labels[i] == Some(cluster) && assignment.roles[i] == PointRole::Core)
        .min_by(|&a, &b| {
            assignment.neighbor_counts[b]
                .cmp(&assignment.neighbor_counts[a])
                .then_with(|| records[a].source_id.cmp(&records[b].source_id))
        })
}

/// One row per cluster, in cluster order.
pub fn tile_layout(assignment: &ClusterAssignment, records: &[EmbeddingRecord]) -> Result<Vec<TileRow>> {
    if records.len() != assignment.labels.len() {
        return Err(Error::config(format!(
            "{} embeddings for {} cluster labels",
            records.len(),
            assignment.labels.len()
        )));
    }
    (0..assignment.n_clusters)
        .map(|c| {
            let exemplar = cluster_exemplar(assignment, records, c)
                .ok_or_else(|| Error::config(format!("cluster {} has no core point", c + 1)))?;
            let others = assignment.members(c).into_iter().filter(|&i| i != exemplar);
            let mut members = vec![exemplar];
            members.extend(
                top_k(&records[exemplar].normalized, records, others, TILE_COLUMNS - 1)
                    .into_iter()
                    .map(|(i, _)| i),
            );
            Ok(TileRow { cluster: c + 1, members })
        })
        .collect()
}

/// Resize an RGB tensor `[H, W, 3]` to a `side x side` image.
pub fn thumbnail(image: &Tensor<f32>, side: usize) -> RgbImage {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let data = resize_bilinear(image.data(), h, w, 3, side, side);
    tensor_to_rgb8(&Tensor::from_vec(&[side, side, 3], data).expect("thumbnail shape"))
}

/// Lay out `rows x TILE_COLUMNS` tiles of `side` pixels; missing members are blank.
pub fn render_grid(
    layout: &[TileRow],
    side: usize,
    mut tile: impl FnMut(usize) -> Result<RgbImage>,
) -> Result<RgbImage> {
    if layout.is_empty() {
        return Err(Error::config("no clusters to lay out"));
    }
    if side == 0 {
        return Err(Error::config("tile size must be positive"));
    }
    let s = side as u32;
    let width = TILE_COLUMNS as u32 * (s + GAP) + GAP;
    let height = layout.len() as u32 * (s + GAP) + GAP;
    let mut canvas = RgbImage::from_pixel(width, height, BACKGROUND);
    for (r, row) in layout.iter().enumerate() {
        for col in 0..TILE_COLUMNS {
            let x0 = GAP + col as u32 * (s + GAP);
            let y0 = GAP + r as u32 * (s + GAP);
            match row.members.get(col) {
                Some(&i) => {
                    let img = tile(i)?;
                    if img.dimensions() != (s, s) {
                        return Err(Error::config(format!("tile {i} is not {side}x{side}")));
                    }
                    image::imageops::replace(&mut canvas, &img, x0 as i64, y0 as i64);
                }
                None => {
                    for y in y0..y0 + s {
                        for x in x0..x0 + s {
                            canvas.put_pixel(x, y, BLANK);
                        }
                    }
                }
            }
        }
    }
    Ok(canvas)
}

/// Image tiles: one row per cluster, exemplar in the first column.
pub fn cluster_tiles(layout: &[TileRow], images: &[Tensor<f32>], side: usize) -> Result<RgbImage> {
    render_grid(layout, side, |i| {
        images
            .get(i)
            .map(|img| thumbnail(img, side))
            .ok_or_else(|| Error::config(format!("no image for point {i}")))
    })
}

/// Same layout as [`cluster_tiles`] with Grad-CAM overlays in place of the images.
pub fn heatmap_grid(
    layout: &[TileRow],
    network: &Network<f64>,
    images: &[Tensor<f32>],
    config: &ExplainConfig,
    opacity: f32,
    side: usize,
) -> Result<RgbImage> {
    render_grid(layout, side, |i| {
        let img = images
            .get(i)
            .ok_or_else(|| Error::config(format!("no image for point {i}")))?;
        let e = explain_image(network, &img.cast(), config)?;
        let overlay = e.heatmap.overlay(img, opacity)?;
        Ok(image::imageops::resize(&overlay, side as u32, side as u32, image::imageops::FilterType::Triangle))
    })
}

/// Square scatter plot; `groups[i] = None` is drawn grey underneath the rest.
pub fn scatter_plot(points: &[[f64; 2]], groups: &[Option<usize>], n_groups: usize, size: u32) -> Result<RgbImage> {
    if points.len() != groups.len() {
        return Err(Error::config("one group per point required"));
    }
    if size < 16 {
        return Err(Error::config("plot size must be at least 16 px"));
    }
    let mut img = RgbImage::from_pixel(size, size, BACKGROUND);
    if points.is_empty() {
        return Ok(img);
    }
    let palette = hsv_palette(n_groups);
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
    let margin = size as f64 * 0.05;
    let scale = (size as f64 - 2.0 * margin) / span;
    let to_px = |p: &[f64; 2]| {
        let x = margin + (p[0] - lo[0]) * scale;
        let y = size as f64 - margin - (p[1] - lo[1]) * scale;
        (x.round() as i64, y.round() as i64)
    };
    let dot = |img: &mut RgbImage, (cx, cy): (i64, i64), color: Rgb<u8>| {
        for y in cy - 1..=cy + 1 {
            for x in cx - 1..=cx + 1 {
                if (0..size as i64).contains(&x) && (0..size as i64).contains(&y) {
                    img.put_pixel(x as u32, y as u32, color);
                }
            }
        }
    };
    for noise_pass in [true, false] {
        for (p, g) in points.iter().zip(groups) {
            match g {
                None if noise_pass => dot(&mut img, to_px(p), NOISE_COLOR),
                Some(g) if !noise_pass => {
                    let color = palette.get(*g).copied().ok_or_else(|| Error::config(format!("group {g} out of range")))?;
                    dot(&mut img, to_px(p), color)
                }
                _ => {}
            }
        }
    }
    Ok(img)
}
