//! Eye bounding boxes and fixed-size crops.
//!
//! The learned detector is replaced by a dark-blob heuristic; training uses
//! jittered ground-truth boxes instead.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::labels::LabelMap;
use crate::rng::Rng;
use crate::synthgen::{CorruptionKind, Sample};
use crate::tensor::Tensor;

pub const MIN_BOX_SIDE: usize = 16;

/// Axis-aligned box in pixels: left, top, height, width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub l: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl BBox {
    pub fn new(l: usize, t: usize, h: usize, w: usize) -> Self {
        Self { l, t, h, w }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self::new(0, 0, height, width)
    }

    pub fn right(&self) -> usize {
        self.l + self.w
    }

    pub fn bottom(&self) -> usize {
        self.t + self.h
    }

    pub fn within(&self, height: usize, width: usize) -> bool {
        self.h > 0 && self.w > 0 && self.bottom() <= height && self.right() <= width
    }

    pub fn area(&self) -> usize {
        self.h * self.w
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = self.right().min(other.right()).saturating_sub(self.l.max(other.l));
        let iy = self.bottom().min(other.bottom()).saturating_sub(self.t.max(other.t));
        let inter = (ix * iy) as f64;
        let union = (self.area() + other.area()) as f64 - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.l, self.t, self.h, self.w]
    }

    /// Box from continuous edges, rounded outward and clamped to the frame.
    /// Sides shorter than [`MIN_BOX_SIDE`] are grown around their centre.
    pub fn from_edges(left: f64, top: f64, right: f64, bottom: f64, height: usize, width: usize) -> Self {
        let (t, b) = clamp_span(top.floor(), bottom.ceil(), height);
        let (l, r) = clamp_span(left.floor(), right.ceil(), width);
        Self::new(l, t, b - t, r - l)
    }
}

fn clamp_span(lo: f64, hi: f64, n: usize) -> (usize, usize) {
    let n_f = n as f64;
    let mut lo = lo.clamp(0.0, n_f);
    let mut hi = hi.clamp(0.0, n_f);
    let min = MIN_BOX_SIDE.min(n) as f64;
    if hi - lo < min {
        let c = 0.5 * (lo + hi);
        lo = (c - 0.5 * min).floor().clamp(0.0, n_f - min);
        hi = lo + min;
    }
    (lo as usize, hi as usize)
}

/// Heuristic pupil-blob detector.
///
/// Smooths with a 3x3 box filter, thresholds at the 5th intensity
/// percentile, keeps the largest
/// 8-connected dark component and centres a square of three times its
/// bounding extent on the component centroid. Side length is clamped to
/// `[32, min(H, W)]`. Frames without a component larger than 20 pixels get
/// the centred square of side `0.75 * min(H, W)`.
pub fn detect_eye_heuristic(image: &Tensor) -> Result<BBox> {
    let (h, w) = image.hw()?;
    if h < 64 || w < 64 {
        return Err(invalid(format!("detector needs a frame of at least 64x64, got {}x{}", h, w)));
    }
    let smooth = box3(image.data(), h, w);
    let data = &smooth[..];
    let mut sorted = data.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = ((0.05 * (h * w) as f64).ceil() as usize).clamp(1, h * w) - 1;
    let thr = sorted[k];
    // A flat frame has no dark blob to speak of.
    let mask: Vec<bool> = if sorted[0] == sorted[h * w - 1] {
        vec![false; h * w]
    } else {
        data.iter().map(|&v| v <= thr).collect()
    };

    let side_max = h.min(w);
    let best = largest_component(&mask, h, w);
    let (cy, cx, side) = match best {
        Some(c) if c.count > 20 => {
            let extent = (c.max_row - c.min_row + 1).max(c.max_col - c.min_col + 1);
            let side = (3 * extent).clamp(32, side_max);
            (c.sum_row / c.count as f64 + 0.5, c.sum_col / c.count as f64 + 0.5, side)
        }
        _ => {
            let side = (0.75 * side_max as f64).round() as usize;
            (h as f64 / 2.0, w as f64 / 2.0, side)
        }
    };
    let t = (cy - side as f64 / 2.0).round().clamp(0.0, (h - side) as f64) as usize;
    let l = (cx - side as f64 / 2.0).round().clamp(0.0, (w - side) as f64) as usize;
    Ok(BBox::new(l, t, side, side))
}

fn box3(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (r0, r1) = (r.saturating_sub(1), (r + 1).min(h - 1));
            let (c0, c1) = (c.saturating_sub(1), (c + 1).min(w - 1));
            let mut acc = 0.0;
            for rr in r0..=r1 {
                acc += src[rr * w + c0..=rr * w + c1].iter().sum::<f64>();
            }
            out.push(acc / ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64);
        }
    }
    out
}

struct Component {
    count: usize,
    sum_row: f64,
    sum_col: f64,
    min_row: usize,
    max_row: usize,
    min_col: usize,
    max_col: usize,
}

fn largest_component(mask: &[bool], h: usize, w: usize) -> Option<Component> {
    let mut seen = vec![false; h * w];
    let mut best: Option<Component> = None;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut c = Component {
            count: 0,
            sum_row: 0.0,
            sum_col: 0.0,
            min_row: usize::MAX,
            max_row: 0,
            min_col: usize::MAX,
            max_col: 0,
        };
        while let Some(p) = stack.pop() {
            let (r, col) = (p / w, p % w);
            c.count += 1;
            c.sum_row += r as f64;
            c.sum_col += col as f64;
            c.min_row = c.min_row.min(r);
            c.max_row = c.max_row.max(r);
            c.min_col = c.min_col.min(col);
            c.max_col = c.max_col.max(col);
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let (nr, nc) = (r as isize + dr, col as isize + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let q = nr as usize * w + nc as usize;
                    if mask[q] && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        if best.as_ref().map_or(true, |b| c.count > b.count) {
            best = Some(c);
        }
    }
    best
}

/// Shifts and rescales `gt` by uniform noise of up to `max_shift` of its
/// size, then clamps to the `height x width` frame.
pub fn jitter_gt_bbox(gt: &BBox, rng: &mut Rng, max_shift: f64, height: usize, width: usize) -> Result<BBox> {
    if !(0.0..=0.25).contains(&max_shift) {
        return Err(invalid(format!("max_shift must lie in [0, 0.25], got {}", max_shift)));
    }
    let dy = rng.uniform(-max_shift, max_shift);
    let dx = rng.uniform(-max_shift, max_shift);
    let sy = 1.0 + rng.uniform(-max_shift, max_shift);
    let sx = 1.0 + rng.uniform(-max_shift, max_shift);
    if max_shift == 0.0 {
        return Ok(*gt);
    }
    let (h, w) = (gt.h as f64, gt.w as f64);
    let cy = gt.t as f64 + h / 2.0 + dy * h;
    let cx = gt.l as f64 + w / 2.0 + dx * w;
    let (hh, hw) = (h * sy / 2.0, w * sx / 2.0);
    Ok(BBox::from_edges(cx - hw, cy - hh, cx + hw, cy + hh, height, width))
}

/// Where a crop came from, so crop-space predictions can be mapped back.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropGeometry {
    pub bbox: BBox,
    pub height: usize,
    pub width: usize,
}

impl CropGeometry {
    /// Frame coordinates (row, col) of the centre of crop pixel `(i, j)`.
    pub fn to_frame(&self, i: f64, j: f64) -> (f64, f64) {
        (
            self.bbox.t as f64 + i * self.bbox.h as f64 / self.height as f64,
            self.bbox.l as f64 + j * self.bbox.w as f64 / self.width as f64,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CropSample {
    pub sample_id: String,
    pub image: Tensor,
    pub labels: LabelMap,
    pub geometry: CropGeometry,
    pub severity: f64,
    pub corruption: Option<CorruptionKind>,
}

/// Crops `bbox` out of the frame and resizes it to `height x width`:
/// bilinear for the image, nearest neighbour for labels.
pub fn crop_resize(sample: &Sample, bbox: &BBox, height: usize, width: usize) -> Result<CropSample> {
    let (fh, fw) = sample.image.hw()?;
    if !bbox.within(fh, fw) {
        return Err(invalid(format!(
            "bbox {:?} lies outside the {}x{} frame",
            bbox.as_array(),
            fh,
            fw
        )));
    }
    if height == 0 || width == 0 {
        return Err(invalid("crop size must be positive"));
    }
    let image = resize_bilinear(&sample.image, bbox, height, width)?;
    let labels = crop_labels(&sample.labels, bbox, height, width);
    Ok(CropSample {
        sample_id: sample.sample_id.clone(),
        image,
        labels,
        geometry: CropGeometry {
            bbox: *bbox,
            height,
            width,
        },
        severity: sample.severity,
        corruption: sample.corruption,
    })
}

/// Nearest-neighbour crop of a label map.
pub fn crop_labels(labels: &LabelMap, bbox: &BBox, height: usize, width: usize) -> LabelMap {
    let mut out = LabelMap::filled(height, width, 0);
    for i in 0..height {
        let sy = bbox.t + ((i as f64 + 0.5) * bbox.h as f64 / height as f64).floor() as usize;
        for j in 0..width {
            let sx = bbox.l + ((j as f64 + 0.5) * bbox.w as f64 / width as f64).floor() as usize;
            out.set(i, j, labels.get(sy.min(bbox.bottom() - 1), sx.min(bbox.right() - 1)));
        }
    }
    out
}

fn resize_bilinear(image: &Tensor, bbox: &BBox, height: usize, width: usize) -> Result<Tensor> {
    let (_, fw) = image.hw()?;
    let src = image.data();
    let sy_scale = bbox.h as f64 / height as f64;
    let sx_scale = bbox.w as f64 / width as f64;
    let mut out = Vec::with_capacity(height * width);
    for i in 0..height {
        let fy = ((i as f64 + 0.5) * sy_scale - 0.5).clamp(0.0, (bbox.h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(bbox.h - 1);
        let ty = fy - y0 as f64;
        for j in 0..width {
            let fx = ((j as f64 + 0.5) * sx_scale - 0.5).clamp(0.0, (bbox.w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(bbox.w - 1);
            let tx = fx - x0 as f64;
            let at = |y: usize, x: usize| src[(bbox.t + y) * fw + bbox.l + x];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
            let bot = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    Tensor::new(vec![height, width], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{render_eye, SceneParams};

    fn clean(seed: u64) -> Sample {
        let mut rng = Rng::new(seed);
        let p = SceneParams::random(&mut rng, 120, 160);
        render_eye(&p, 120, 160, &mut rng, "t").unwrap()
    }

    #[test]
    fn iou_basics() {
        let a = BBox::new(0, 0, 10, 10);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&BBox::new(20, 20, 5, 5)), 0.0);
        assert!((a.iou(&BBox::new(5, 0, 10, 10)) - 50.0 / 150.0).abs() < 1e-12);
    }

    #[test]
    fn uniform_frame_gets_centred_fallback() {
        let img = Tensor::full(&[120, 160], 0.5);
        let b = detect_eye_heuristic(&img).unwrap();
        assert_eq!((b.h, b.w), (90, 90));
        assert_eq!((b.t, b.l), (15, 35));
    }

    #[test]
    fn detector_box_within_frame() {
        for seed in 0..20 {
            let s = clean(seed);
            let b = detect_eye_heuristic(&s.image).unwrap();
            assert!(b.within(120, 160));
            assert!(b.h >= 32);
        }
    }

    #[test]
    fn jitter_zero_is_identity_and_stays_in_frame() {
        let gt = BBox::new(30, 20, 60, 90);
        let mut rng = Rng::new(1);
        assert_eq!(jitter_gt_bbox(&gt, &mut rng, 0.0, 120, 160).unwrap(), gt);
        let edge = BBox::new(0, 0, 40, 50);
        for _ in 0..1000 {
            let j = jitter_gt_bbox(&edge, &mut rng, 0.25, 120, 160).unwrap();
            assert!(j.within(120, 160));
        }
        assert!(jitter_gt_bbox(&gt, &mut rng, 0.3, 120, 160).is_err());
    }

    #[test]
    fn full_frame_crop_is_identity() {
        let s = clean(3);
        let c = crop_resize(&s, &BBox::full(120, 160), 120, 160).unwrap();
        assert_eq!(c.image, s.image);
        assert_eq!(c.labels, s.labels);
    }

    #[test]
    fn crop_outside_frame_rejected() {
        let s = clean(4);
        assert!(crop_resize(&s, &BBox::new(100, 0, 50, 100), 48, 48).is_err());
    }

    #[test]
    fn crop_never_invents_classes() {
        let s = clean(5);
        let c = crop_resize(&s, &s.gt_bbox, 37, 53).unwrap();
        let full = s.labels.histogram();
        for (cls, n) in c.labels.histogram().iter().enumerate() {
            if *n > 0 {
                assert!(full[cls] > 0);
            }
        }
    }

    #[test]
    fn exact_crop_preserves_foreground_histogram() {
        for seed in 0..10 {
            let s = clean(seed);
            let b = s.gt_bbox;
            let c = crop_resize(&s, &b, b.h, b.w).unwrap();
            let (hc, hf) = (c.labels.histogram(), s.labels.histogram());
            assert_eq!(&hc[1..], &hf[1..], "seed {seed}");
        }
    }

    #[test]
    fn geometry_maps_back_to_frame() {
        let g = CropGeometry {
            bbox: BBox::new(10, 20, 48, 96),
            height: 96,
            width: 96,
        };
        assert_eq!(g.to_frame(0.0, 0.0), (20.0, 10.0));
        assert_eq!(g.to_frame(96.0, 96.0), (68.0, 106.0));
    }
}
