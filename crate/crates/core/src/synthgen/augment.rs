use crate::detect::BBox;
use crate::error::{invalid, Result};
use crate::labels::{LabelMap, BACKGROUND};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::Sample;

/// One draw of the geometric augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    /// Radians, counter-clockwise about the frame centre.
    pub rotation: f64,
    /// (rows, cols) in pixels.
    pub translation: (f64, f64),
    pub scale: f64,
    pub flip: bool,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        rotation: 0.0,
        translation: (0.0, 0.0),
        scale: 1.0,
        flip: false,
    };

    /// Rotation within 15 degrees, translation within 8% of the frame,
    /// scale in [0.9, 1.1], horizontal flip with probability 0.5.
    pub fn random(rng: &mut Rng, height: usize, width: usize) -> Self {
        Self {
            rotation: rng.uniform(-15.0, 15.0).to_radians(),
            translation: (
                rng.uniform(-0.08, 0.08) * height as f64,
                rng.uniform(-0.08, 0.08) * width as f64,
            ),
            scale: rng.uniform(0.9, 1.1),
            flip: rng.bernoulli(0.5),
        }
    }
}

pub fn augment(sample: &Sample, rng: &mut Rng) -> Result<Sample> {
    let p = AugmentParams::random(rng, sample.height(), sample.width());
    augment_with(sample, &p)
}

/// Similarity warp about the frame centre (bilinear image, nearest-neighbour
/// labels, background outside the source frame) followed by an optional
/// horizontal flip.
pub fn augment_with(sample: &Sample, p: &AugmentParams) -> Result<Sample> {
    let (h, w) = sample.image.hw()?;
    let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
    let (s, c) = p.rotation.sin_cos();
    let src = sample.image.data();

    let mut image = Vec::with_capacity(h * w);
    let mut labels = LabelMap::filled(h, w, BACKGROUND);
    for row in 0..h {
        for col in 0..w {
            // Inverse map of the output pixel centre.
            let oy = (row as f64 + 0.5 - cy - p.translation.0) / p.scale;
            let ox = (col as f64 + 0.5 - cx - p.translation.1) / p.scale;
            let sy = cy + (-s * ox + c * oy);
            let sx = cx + (c * ox + s * oy);
            image.push(bilinear(src, h, w, sy - 0.5, sx - 0.5));
            let (ly, lx) = (sy.floor(), sx.floor());
            if ly >= 0.0 && lx >= 0.0 && (ly as usize) < h && (lx as usize) < w {
                labels.set(row, col, sample.labels.get(ly as usize, lx as usize));
            }
        }
    }
    let mut image = Tensor::new(vec![h, w], image)?;

    // Forward map of the box corners.
    let b = sample.gt_bbox;
    let corners = [
        (b.t as f64, b.l as f64),
        (b.t as f64, b.right() as f64),
        (b.bottom() as f64, b.l as f64),
        (b.bottom() as f64, b.right() as f64),
    ];
    let mapped: Vec<(f64, f64)> = corners
        .iter()
        .map(|&(y, x)| {
            let (dy, dx) = (y - cy, x - cx);
            (
                cy + p.translation.0 + p.scale * (s * dx + c * dy),
                cx + p.translation.1 + p.scale * (c * dx - s * dy),
            )
        })
        .collect();
    let top = mapped.iter().map(|m| m.0).fold(f64::INFINITY, f64::min);
    let bottom = mapped.iter().map(|m| m.0).fold(f64::NEG_INFINITY, f64::max);
    let mut left = mapped.iter().map(|m| m.1).fold(f64::INFINITY, f64::min);
    let mut right = mapped.iter().map(|m| m.1).fold(f64::NEG_INFINITY, f64::max);

    if p.flip {
        flip_horizontal(image.data_mut(), &mut labels.data, h, w);
        let (l, r) = (w as f64 - right, w as f64 - left);
        left = l;
        right = r;
    }

    let gt_bbox = if *p == AugmentParams::IDENTITY {
        sample.gt_bbox
    } else {
        BBox::from_edges(left, top, right, bottom, h, w)
    };

    Ok(Sample {
        image,
        labels,
        gt_bbox,
        ..sample.clone()
    })
}

fn flip_horizontal(image: &mut [f64], labels: &mut [u8], h: usize, w: usize) {
    for row in 0..h {
        image[row * w..(row + 1) * w].reverse();
        labels[row * w..(row + 1) * w].reverse();
    }
}

/// Bilinear sample at continuous pixel-index coordinates, edges replicated.
fn bilinear(src: &[f64], h: usize, w: usize, fy: f64, fx: f64) -> f64 {
    let fy = fy.clamp(0.0, (h - 1) as f64);
    let fx = fx.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
    let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
    let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
    top * (1.0 - ty) + bot * ty
}

/// Pixelwise `v^gamma`.
pub fn gamma_correct(image: &Tensor, gamma: f64) -> Result<Tensor> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(invalid(format!("gamma must be positive, got {}", gamma)));
    }
    let mut out = image.clone();
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0).powf(gamma);
    }
    Ok(out)
}
