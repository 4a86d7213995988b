use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::labels::{LabelMap, PUPIL};

/// A pupil-position estimate in normalized `(u, v)` = (column, row)
/// coordinates, its image's uncertainty score, and the true position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GazeSample {
    pub estimate: (f64, f64),
    pub s_unc: f64,
    pub truth: (f64, f64),
}

/// Centroid of the pupil pixels as `((j + 0.5) / W, (i + 0.5) / H)`
/// averaged over pupil pixels; `None` when no pixel is labelled pupil.
pub fn pupil_centroid(labels: &LabelMap) -> Option<(f64, f64)> {
    let (mut su, mut sv, mut n) = (0.0, 0.0, 0usize);
    for i in 0..labels.height {
        for j in 0..labels.width {
            if labels.get(i, j) == PUPIL {
                su += j as f64 + 0.5;
                sv += i as f64 + 0.5;
                n += 1;
            }
        }
    }
    (n > 0).then(|| (su / n as f64 / labels.width as f64, sv / n as f64 / labels.height as f64))
}

/// Weights `softmax(-s_unc / temperature)` over the samples.
pub fn fusion_weights(scores: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(invalid("cannot fuse an empty set of estimates"));
    }
    if !(temperature > 0.0) {
        return Err(invalid(format!("temperature must be positive, got {}", temperature)));
    }
    let logits: Vec<f64> = scores.iter().map(|s| -s / temperature).collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / z).collect())
}

/// Uncertainty-weighted average of the estimates.
pub fn fuse_gaze(samples: &[GazeSample], temperature: f64) -> Result<(f64, f64)> {
    let scores: Vec<f64> = samples.iter().map(|s| s.s_unc).collect();
    let w = fusion_weights(&scores, temperature)?;
    Ok(samples
        .iter()
        .zip(&w)
        .fold((0.0, 0.0), |(u, v), (s, w)| (u + w * s.estimate.0, v + w * s.estimate.1)))
}

/// Plain average of the estimates.
pub fn average_gaze(samples: &[GazeSample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(invalid("cannot average an empty set of estimates"));
    }
    let n = samples.len() as f64;
    let (u, v) = samples
        .iter()
        .fold((0.0, 0.0), |(u, v), s| (u + s.estimate.0, v + s.estimate.1));
    Ok((u / n, v / n))
}

pub fn gaze_error(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}
