//! Frame-to-crop preparation shared by training, inference and evaluation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detect::{crop_resize, detect_eye_heuristic, jitter_gt_bbox, BBox, CropGeometry, CropSample};
use crate::error::{invalid, Error, Result};
use crate::eval::pupil_centroid;
use crate::labels::{LabelMap, BACKGROUND};
use crate::par;
use crate::rng::Rng;
use crate::segnet::SegModel;
use crate::synthgen::{quantize, Sample};
use crate::uncertainty::{unc_score, UncHead};

/// Default relative jitter applied to ground-truth boxes.
pub const DEFAULT_MAX_SHIFT: f64 = 0.1;

/// How the eye box for a frame is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Detector {
    Heuristic,
    GtJitter,
    /// No detection: the whole frame is resized to the network input.
    FullFrame,
}

impl fmt::Display for Detector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Detector::Heuristic => "heuristic",
            Detector::GtJitter => "gt-jitter",
            Detector::FullFrame => "full-frame",
        })
    }
}

impl FromStr for Detector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heuristic" => Ok(Detector::Heuristic),
            "gt-jitter" => Ok(Detector::GtJitter),
            "full-frame" => Ok(Detector::FullFrame),
            other => Err(invalid(format!(
                "unknown detector '{}' (heuristic|gt-jitter|full-frame)",
                other
            ))),
        }
    }
}

/// Seeds the jitter from the frame content and its box, so two identical
/// frames always receive the same crop regardless of their ids or order.
fn content_stream(sample: &Sample) -> u64 {
    let mut h = Sha256::new();
    for &v in sample.image.data() {
        h.update([quantize(v)]);
    }
    for v in sample.gt_bbox.as_array() {
        h.update((v as u64).to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn eye_box(sample: &Sample, detector: Detector, seed: u64, max_shift: f64) -> Result<BBox> {
    let (h, w) = sample.image.hw()?;
    match detector {
        Detector::Heuristic => detect_eye_heuristic(&sample.image),
        Detector::FullFrame => Ok(BBox::full(h, w)),
        Detector::GtJitter => {
            let mut rng = Rng::derive(seed, content_stream(sample));
            jitter_gt_bbox(&sample.gt_bbox, &mut rng, max_shift, h, w)
        }
    }
}

/// Detects (or jitters) the eye box of every frame and resizes the crop.
pub fn prepare_crops(
    samples: &[Sample],
    detector: Detector,
    seed: u64,
    max_shift: f64,
    height: usize,
    width: usize,
) -> Result<Vec<CropSample>> {
    par::try_map(samples, |s| {
        let bbox = eye_box(s, detector, seed, max_shift)?;
        crop_resize(s, &bbox, height, width)
    })
}

/// Model outputs for one crop.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredPrediction {
    pub sample_id: String,
    /// Predicted labels in crop space.
    pub labels: LabelMap,
    pub s_unc: f64,
    pub geometry: CropGeometry,
}

/// Segments every crop and scores it with the head.
pub fn infer_crops(seg: &SegModel, head: &UncHead, crops: &[CropSample]) -> Result<Vec<ScoredPrediction>> {
    par::try_map(crops, |c| {
        let f = seg.forward_features(&c.image)?;
        let (_, labels) = seg.predict_from_latent(&f.z)?;
        let cov = head.forward(&f)?;
        Ok(ScoredPrediction {
            sample_id: c.sample_id.clone(),
            labels,
            s_unc: unc_score(&cov),
            geometry: c.geometry,
        })
    })
}

/// Pastes crop-space labels back into a `height x width` frame with
/// nearest-neighbour sampling; pixels outside the box are background.
pub fn labels_to_frame(labels: &LabelMap, geometry: &CropGeometry, height: usize, width: usize) -> LabelMap {
    let b = geometry.bbox;
    let mut out = LabelMap::filled(height, width, BACKGROUND);
    for r in b.t..b.bottom().min(height) {
        let ci = (((r - b.t) as f64 + 0.5) * labels.height as f64 / b.h as f64).floor() as usize;
        for c in b.l..b.right().min(width) {
            let cj = (((c - b.l) as f64 + 0.5) * labels.width as f64 / b.w as f64).floor() as usize;
            out.set(r, c, labels.get(ci.min(labels.height - 1), cj.min(labels.width - 1)));
        }
    }
    out
}

/// Pupil centroid of a crop prediction in normalized frame coordinates.
pub fn frame_pupil_centroid(pred: &ScoredPrediction, height: usize, width: usize) -> Option<(f64, f64)> {
    let (u, v) = pupil_centroid(&pred.labels)?;
    let (row, col) = pred
        .geometry
        .to_frame(v * pred.geometry.height as f64, u * pred.geometry.width as f64);
    Some((col / width as f64, row / height as f64))
}
